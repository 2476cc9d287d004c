//! Incremental single-document updates.
//!
//! A document is re-chunked whole; content-addressed ids make unchanged
//! chunks drop out of the diff. Applying a plan runs a fixed sequence of
//! stages against the in-memory state, then commits. Any failure before the
//! commit publishes rolls every stage back.

use std::collections::HashSet;
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::chunker::{chunk_document, RetrieveChunk, SearchChunk};
use crate::embedding::EmbeddingVector;
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::ids::{content_hash, RetrieveId, SearchId};
use crate::ingest::{Document, TokenSpan};
use crate::storage::{self, DocEntry};
use crate::vector_index::IndexedVector;

#[derive(Debug, Clone, PartialEq)]
pub struct UpdatePlan {
    pub doc_id: String,
    /// Content hash of the stored version, if any.
    pub previous_hash: Option<u64>,
    /// Content hash of the new version; `None` deletes the document.
    pub new_hash: Option<u64>,
    /// Full retrieve-chunk list of the new version, in document order.
    pub retrieve_order: Vec<RetrieveId>,
    pub stale_retrieve_ids: Vec<RetrieveId>,
    pub stale_search_ids: Vec<SearchId>,
    pub new_retrieve: Vec<RetrieveChunk>,
    pub new_search: Vec<SearchChunk>,
    pub new_vectors: Vec<EmbeddingVector>,
    pub new_mapping: Vec<(SearchId, RetrieveId)>,
    pub identify_ns: u64,
    pub reembed_ns: u64,
}

impl UpdatePlan {
    /// Nothing to change: same content, or deleting an unknown document.
    pub fn is_noop(&self) -> bool {
        self.previous_hash == self.new_hash
            && self.stale_retrieve_ids.is_empty()
            && self.new_retrieve.is_empty()
            || (self.previous_hash.is_none() && self.new_hash.is_none())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    RemoveVectors,
    DeleteEntries,
    InsertDocuments,
    InsertMappings,
    InsertVectors,
    Commit,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::RemoveVectors,
        Stage::DeleteEntries,
        Stage::InsertDocuments,
        Stage::InsertMappings,
        Stage::InsertVectors,
        Stage::Commit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::RemoveVectors => "remove-vectors",
            Stage::DeleteEntries => "delete-entries",
            Stage::InsertDocuments => "insert-documents",
            Stage::InsertMappings => "insert-mappings",
            Stage::InsertVectors => "insert-vectors",
            Stage::Commit => "commit",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ApplyOptions {
    /// Fail right after this stage completes (for testing rollback). For
    /// [`Stage::Commit`] the files are staged but never published.
    pub fail_after: Option<Stage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateOutcome {
    Noop,
    Inserted,
    Updated,
    Deleted,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateTimings {
    pub identify_ns: u64,
    pub delete_ns: u64,
    pub reembed_ns: u64,
    pub update_ns: u64,
    pub commit_ns: u64,
}

impl UpdateTimings {
    pub fn total_ns(&self) -> u64 {
        self.identify_ns + self.delete_ns + self.reembed_ns + self.update_ns + self.commit_ns
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub doc_id: String,
    pub outcome: UpdateOutcome,
    pub stale_retrieve: usize,
    pub stale_search: usize,
    pub new_retrieve: usize,
    pub new_search: usize,
    pub timings: UpdateTimings,
}

fn ns_since(t: Instant) -> u64 {
    t.elapsed().as_nanos() as u64
}

/// Diffs `doc` against the stored version and embeds the new search chunks.
/// Does not mutate the engine.
pub fn plan_update(engine: &Engine, doc: &Document) -> Result<UpdatePlan> {
    let t = Instant::now();
    let chunked = chunk_document(doc, &engine.config().chunking)?;
    let prev = engine.docs().document(&doc.doc_id);
    let prev_ids: HashSet<RetrieveId> = prev.map(|d| d.retrieve_ids.iter().copied().collect()).unwrap_or_default();
    let new_ids: HashSet<RetrieveId> = chunked.retrieve.iter().map(|r| r.retrieve_id).collect();

    let stale_retrieve_ids: Vec<RetrieveId> = prev
        .map(|d| d.retrieve_ids.iter().copied().filter(|r| !new_ids.contains(r)).collect())
        .unwrap_or_default();
    let stale_search_ids: Vec<SearchId> = stale_retrieve_ids
        .iter()
        .flat_map(|&r| engine.mapping().children(r).iter().copied())
        .collect();
    let fresh: HashSet<RetrieveId> = new_ids.difference(&prev_ids).copied().collect();
    let new_retrieve: Vec<RetrieveChunk> = chunked
        .retrieve
        .iter()
        .filter(|r| fresh.contains(&r.retrieve_id))
        .cloned()
        .collect();
    let new_search: Vec<SearchChunk> = chunked
        .search
        .into_iter()
        .filter(|s| fresh.contains(&s.retrieve_id))
        .collect();
    let new_mapping = new_search.iter().map(|s| (s.search_id, s.retrieve_id)).collect();
    let identify_ns = ns_since(t);

    let t = Instant::now();
    let texts: Vec<&str> = new_search.iter().map(|s| s.text.as_str()).collect();
    let new_vectors = if texts.is_empty() {
        Vec::new()
    } else {
        engine.embedder().embed_batch(&texts)?
    };
    let reembed_ns = ns_since(t);

    Ok(UpdatePlan {
        doc_id: doc.doc_id.clone(),
        previous_hash: prev.map(|d| d.content_hash),
        new_hash: Some(content_hash(&doc.text)),
        retrieve_order: chunked.retrieve.iter().map(|r| r.retrieve_id).collect(),
        stale_retrieve_ids,
        stale_search_ids,
        new_retrieve,
        new_search,
        new_vectors,
        new_mapping,
        identify_ns,
        reembed_ns,
    })
}

/// Plan that removes `doc_id` and everything derived from it.
pub fn plan_delete(engine: &Engine, doc_id: &str) -> UpdatePlan {
    let t = Instant::now();
    let prev = engine.docs().document(doc_id);
    let stale_retrieve_ids = prev.map(|d| d.retrieve_ids.clone()).unwrap_or_default();
    let stale_search_ids = stale_retrieve_ids
        .iter()
        .flat_map(|&r| engine.mapping().children(r).iter().copied())
        .collect();
    UpdatePlan {
        doc_id: doc_id.to_owned(),
        previous_hash: prev.map(|d| d.content_hash),
        new_hash: None,
        retrieve_order: Vec::new(),
        stale_retrieve_ids,
        stale_search_ids,
        new_retrieve: Vec::new(),
        new_search: Vec::new(),
        new_vectors: Vec::new(),
        new_mapping: Vec::new(),
        identify_ns: ns_since(t),
        reembed_ns: 0,
    }
}

enum Undo {
    RestorePairs(Vec<(SearchId, RetrieveId)>),
    RemovePairs(Vec<SearchId>),
    RestoreChunk(RetrieveId, String, TokenSpan, Vec<u8>),
    RemoveChunk(RetrieveId),
    DocEntry(String, Option<DocEntry>),
}

fn rollback(engine: &mut Engine, undo: Vec<Undo>) {
    engine.index.rollback();
    for u in undo.into_iter().rev() {
        match u {
            Undo::RestorePairs(pairs) => {
                engine
                    .mapping
                    .put_mapping(&pairs)
                    .expect("restoring removed pairs cannot conflict");
            }
            Undo::RemovePairs(ids) => {
                for s in ids {
                    engine.mapping.remove(s);
                }
            }
            Undo::RestoreChunk(id, doc, span, bytes) => engine.docs.restore_chunk(id, doc, span, bytes),
            Undo::RemoveChunk(id) => {
                engine.docs.remove_chunk(id);
            }
            Undo::DocEntry(doc, entry) => {
                engine.docs.set_doc_entry(&doc, entry);
            }
        }
    }
}

fn check(stage: Stage, opts: &ApplyOptions) -> Result<()> {
    if opts.fail_after == Some(stage) {
        return Err(Error::Injected(stage.name()));
    }
    Ok(())
}

fn run_stages(
    engine: &mut Engine,
    plan: &UpdatePlan,
    opts: &ApplyOptions,
    undo: &mut Vec<Undo>,
    timings: &mut UpdateTimings,
) -> Result<()> {
    let t = Instant::now();
    for &s in &plan.stale_search_ids {
        engine.index.remove(s)?;
    }
    check(Stage::RemoveVectors, opts)?;

    for &r in &plan.stale_retrieve_ids {
        let children = engine.mapping.remove_parent(r);
        undo.push(Undo::RestorePairs(children.into_iter().map(|s| (s, r)).collect()));
        if let Some((doc, span, bytes)) = engine.docs.remove_chunk(r) {
            undo.push(Undo::RestoreChunk(r, doc, span, bytes));
        }
    }
    if plan.new_hash.is_none() {
        let old = engine.docs.set_doc_entry(&plan.doc_id, None);
        undo.push(Undo::DocEntry(plan.doc_id.clone(), old));
    }
    check(Stage::DeleteEntries, opts)?;
    timings.delete_ns = ns_since(t);

    let t = Instant::now();
    if let Some(hash) = plan.new_hash {
        for c in &plan.new_retrieve {
            if !engine.docs.contains(c.retrieve_id) {
                undo.push(Undo::RemoveChunk(c.retrieve_id));
            }
        }
        let old = engine.docs.document(&plan.doc_id).cloned();
        engine
            .docs
            .put_document(&plan.doc_id, hash, plan.retrieve_order.clone(), &plan.new_retrieve)?;
        undo.push(Undo::DocEntry(plan.doc_id.clone(), old));
    }
    check(Stage::InsertDocuments, opts)?;

    let added = engine.mapping.put_mapping(&plan.new_mapping)?;
    undo.push(Undo::RemovePairs(added));
    check(Stage::InsertMappings, opts)?;

    for (s, v) in plan.new_search.iter().zip(&plan.new_vectors) {
        engine.index.insert(IndexedVector::live(s.search_id, v.clone()))?;
    }
    check(Stage::InsertVectors, opts)?;
    timings.update_ns = ns_since(t);
    Ok(())
}

/// Applies `plan` stage by stage and commits. On any error the engine is
/// returned to its exact prior state.
pub fn apply_update(engine: &mut Engine, plan: &UpdatePlan, opts: &ApplyOptions) -> Result<UpdateReport> {
    let current = engine.docs().document(&plan.doc_id).map(|d| d.content_hash);
    if current != plan.previous_hash {
        return Err(Error::Contract(format!(
            "plan for {} was made against a different version of the document",
            plan.doc_id
        )));
    }
    if plan.new_search.len() != plan.new_vectors.len() {
        return Err(Error::Contract("plan has a vector count mismatch".into()));
    }
    let mut timings = UpdateTimings {
        identify_ns: plan.identify_ns,
        reembed_ns: plan.reembed_ns,
        ..UpdateTimings::default()
    };
    let outcome = match (plan.previous_hash, plan.new_hash) {
        _ if plan.is_noop() => UpdateOutcome::Noop,
        (None, Some(_)) => UpdateOutcome::Inserted,
        (Some(_), Some(_)) => UpdateOutcome::Updated,
        _ => UpdateOutcome::Deleted,
    };
    let report = |timings| UpdateReport {
        doc_id: plan.doc_id.clone(),
        outcome,
        stale_retrieve: plan.stale_retrieve_ids.len(),
        stale_search: plan.stale_search_ids.len(),
        new_retrieve: plan.new_retrieve.len(),
        new_search: plan.new_search.len(),
        timings,
    };
    if outcome == UpdateOutcome::Noop {
        return Ok(report(timings));
    }
    if engine.dir().is_some() {
        engine.writable_dir()?;
    }

    engine.index.begin()?;
    let mut undo = Vec::new();
    if let Err(e) = run_stages(engine, plan, opts, &mut undo, &mut timings) {
        rollback(engine, undo);
        return Err(e);
    }

    let t = Instant::now();
    if let Some(dir) = engine.dir().map(|d| d.to_path_buf()) {
        let files = engine.encode_files();
        let refs: Vec<(&str, &[u8])> = files.iter().map(|(n, b)| (*n, b.as_slice())).collect();
        let names: Vec<&str> = refs.iter().map(|(n, _)| *n).collect();
        let staged = storage::stage_files(&dir, &refs)
            .and_then(|_| check(Stage::Commit, opts))
            .and_then(|_| storage::publish_staged(&dir, &names));
        if let Err(e) = staged {
            storage::discard_staged(&dir, &names);
            rollback(engine, undo);
            return Err(e);
        }
    } else if let Err(e) = check(Stage::Commit, opts) {
        rollback(engine, undo);
        return Err(e);
    }
    engine.index.commit();
    timings.commit_ns = ns_since(t);
    Ok(report(timings))
}

/// Re-indexes one document (insert or replace).
pub fn update_document(engine: &mut Engine, doc: &Document) -> Result<UpdateReport> {
    let plan = plan_update(engine, doc)?;
    apply_update(engine, &plan, &ApplyOptions::default())
}

/// Removes a document. Unknown ids are a no-op.
pub fn delete_document(engine: &mut Engine, doc_id: &str) -> Result<UpdateReport> {
    let plan = plan_delete(engine, doc_id);
    apply_update(engine, &plan, &ApplyOptions::default())
}
