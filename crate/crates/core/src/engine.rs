//! The engine ties chunking, embedding, the vector index and the stores
//! together and owns the on-disk index directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chunker::{chunk_document, ChunkedDocument, ChunkingConfig};
use crate::embedding::{probe_remote_fingerprint, Embedder, EmbedderSpec, Provider};
use crate::error::{Error, Result};
use crate::ids::content_hash;
use crate::ingest::Document;
use crate::storage::{
    self, read_file, Counts, DocStore, FileDigest, IndexManifest, ParentMapping, WriterLock,
    DOCSTORE_DATA_FILE, DOCSTORE_INDEX_FILE, FORMAT_VERSION, LOCK_FILE, MANIFEST_FILE, MAPPING_FILE,
    VECTORS_FILE,
};
use crate::vector_index::{segment, Backend, HnswParams, IndexedVector, VectorIndex};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub chunking: ChunkingConfig,
    pub embedder: EmbedderSpec,
    pub backend: Backend,
    pub index: HnswParams,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            chunking: ChunkingConfig::default(),
            embedder: EmbedderSpec::default(),
            backend: Backend::Hnsw,
            index: HnswParams::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.chunking.validate()?;
        self.embedder.validate()?;
        self.index.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorageStats {
    pub documents: usize,
    pub search_chunks: usize,
    pub retrieve_chunks: usize,
    pub dim: usize,
    pub embedding_bytes: usize,
    pub mapping_bytes: usize,
    pub text_bytes: usize,
}

impl StorageStats {
    pub fn chunk_ratio(&self) -> f64 {
        if self.retrieve_chunks == 0 {
            0.0
        } else {
            self.search_chunks as f64 / self.retrieve_chunks as f64
        }
    }

    /// Mapping payload relative to raw embedding storage.
    pub fn mapping_to_embedding(&self) -> f64 {
        if self.embedding_bytes == 0 {
            0.0
        } else {
            (self.mapping_bytes - storage::MAPPING_HEADER_BYTES) as f64 / self.embedding_bytes as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub documents: usize,
    pub search_chunks: usize,
    pub retrieve_chunks: usize,
    pub problems: Vec<String>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.problems.is_empty()
    }
}

pub struct Engine {
    pub(crate) config: EngineConfig,
    pub(crate) corpus_root: Option<String>,
    pub(crate) mapping: ParentMapping,
    pub(crate) docs: DocStore,
    pub(crate) index: VectorIndex,
    pub(crate) embedder: Box<dyn Embedder>,
    dir: Option<PathBuf>,
    lock: Option<WriterLock>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("dir", &self.dir)
            .field("index", &self.index)
            .field("documents", &self.docs.document_count())
            .finish()
    }
}

/// A remote spec without a fingerprint adopts the one the service reports.
fn resolve_spec(spec: &EmbedderSpec) -> Result<EmbedderSpec> {
    let mut spec = spec.clone();
    if spec.provider == Provider::Remote && spec.provider_fingerprint.is_empty() {
        spec.provider_fingerprint = probe_remote_fingerprint(&spec)?;
    }
    Ok(spec)
}

impl Engine {
    /// An empty in-memory engine.
    pub fn empty(config: EngineConfig) -> Result<Self> {
        config.validate()?;
        let mut config = config;
        config.embedder = resolve_spec(&config.embedder)?;
        let embedder = config.embedder.build()?;
        let index = VectorIndex::new(config.embedder.dim, config.backend, config.index)?
            .with_fingerprint(embedder.fingerprint());
        Ok(Self {
            config,
            corpus_root: None,
            mapping: ParentMapping::new(),
            docs: DocStore::new(),
            index,
            embedder,
            dir: None,
            lock: None,
        })
    }

    /// Indexes `documents` in memory.
    pub fn build(config: EngineConfig, documents: &[Document]) -> Result<Self> {
        let mut engine = Self::empty(config)?;
        engine.add_documents(documents)?;
        Ok(engine)
    }

    fn add_documents(&mut self, documents: &[Document]) -> Result<()> {
        let mut seen = HashSet::new();
        for d in documents {
            if !seen.insert(d.doc_id.as_str()) || self.docs.document(&d.doc_id).is_some() {
                return Err(Error::Conflict(format!("duplicate document id {}", d.doc_id)));
            }
        }
        let cfg = self.config.chunking;
        let chunked: Vec<ChunkedDocument> = documents
            .par_iter()
            .map(|d| chunk_document(d, &cfg))
            .collect::<Result<_>>()?;
        let texts: Vec<&str> = chunked
            .iter()
            .flat_map(|c| c.search.iter().map(|s| s.text.as_str()))
            .collect();
        let vectors = self.embedder.embed_batch(&texts)?;
        if vectors.len() != texts.len() {
            return Err(Error::Contract("embedder returned the wrong number of vectors".into()));
        }

        for (doc, cd) in documents.iter().zip(&chunked) {
            let ids = cd.retrieve.iter().map(|r| r.retrieve_id).collect();
            self.docs
                .put_document(&doc.doc_id, content_hash(&doc.text), ids, &cd.retrieve)?;
            self.mapping.put_mapping(&cd.mapping)?;
        }
        let search = chunked.iter().flat_map(|c| &c.search);
        for (s, v) in search.zip(vectors) {
            self.index.insert(IndexedVector::live(s.search_id, v))?;
        }
        Ok(())
    }

    /// Builds a fresh index in `dir` and commits it. A directory that
    /// already holds files is refused unless `force` is set.
    pub fn create(
        dir: &Path,
        config: EngineConfig,
        documents: &[Document],
        corpus_root: Option<String>,
        force: bool,
    ) -> Result<Self> {
        if dir.exists() {
            let occupied = std::fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .flatten()
                .any(|e| e.file_name() != LOCK_FILE);
            if occupied && !force {
                return Err(Error::IndexExists(dir.to_path_buf()));
            }
        }
        let lock = WriterLock::acquire(dir)?;
        if force {
            for name in [
                MANIFEST_FILE,
                MAPPING_FILE,
                DOCSTORE_DATA_FILE,
                DOCSTORE_INDEX_FILE,
                VECTORS_FILE,
                storage::JOURNAL_FILE,
            ] {
                let _ = std::fs::remove_file(dir.join(name));
            }
        }
        let mut engine = Self::build(config, documents)?;
        engine.corpus_root = corpus_root;
        engine.dir = Some(dir.to_path_buf());
        engine.lock = Some(lock);
        engine.persist()?;
        Ok(engine)
    }

    /// Opens a committed index read-only with the embedder it was built
    /// with.
    pub fn open(dir: &Path) -> Result<Self> {
        Self::open_with_embedder(dir, None)
    }

    /// Opens read-only, optionally substituting the query embedder. A
    /// substitute with a different fingerprint makes queries fail.
    pub fn open_with_embedder(dir: &Path, embedder: Option<&EmbedderSpec>) -> Result<Self> {
        let mut last = None;
        for attempt in 0..5 {
            match Self::load(dir, embedder) {
                Err(e @ Error::Corrupt { .. }) => {
                    // a writer may have published between our reads
                    log::debug!("snapshot read attempt {attempt} failed: {e}");
                    last = Some(e);
                    std::thread::sleep(Duration::from_millis(20));
                }
                other => return other,
            }
        }
        Err(last.expect("loop ran"))
    }

    /// Takes the writer lock, recovers any interrupted commit and opens.
    pub fn open_writable(dir: &Path) -> Result<Self> {
        let lock = WriterLock::acquire(dir)?;
        storage::recover(dir, &lock)?;
        let mut engine = Self::load(dir, None)?;
        engine.lock = Some(lock);
        Ok(engine)
    }

    fn load(dir: &Path, embedder: Option<&EmbedderSpec>) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(Error::NotFound(format!("no index at {}", dir.display())));
        }
        let manifest = IndexManifest::from_bytes(&read_file(dir, MANIFEST_FILE)?)?;
        let read = |name: &str| -> Result<Vec<u8>> {
            let bytes = read_file(dir, name)?;
            manifest.verify(name, &bytes)?;
            Ok(bytes)
        };
        let mapping = ParentMapping::decode(&read(MAPPING_FILE)?)?;
        let docs = DocStore::decode(&read(DOCSTORE_DATA_FILE)?, &read(DOCSTORE_INDEX_FILE)?, &mapping)?;
        let index = segment::decode(&read(VECTORS_FILE)?)?;

        let config = EngineConfig {
            chunking: manifest.chunking,
            embedder: manifest.embedder.clone(),
            backend: manifest.backend,
            index: manifest.index,
        };
        config.validate()?;
        let spec = match embedder {
            Some(s) => resolve_spec(s)?,
            None => config.embedder.clone(),
        };
        let engine = Self {
            embedder: spec.build()?,
            config,
            corpus_root: manifest.corpus_root.clone(),
            mapping,
            docs,
            index,
            dir: Some(dir.to_path_buf()),
            lock: None,
        };
        let counts = engine.counts();
        if counts != manifest.counts {
            return Err(Error::corrupt(
                MANIFEST_FILE,
                format!("counts {:?} do not match stored data {counts:?}", manifest.counts),
            ));
        }
        if engine.index.fingerprint() != manifest.fingerprint {
            return Err(Error::corrupt(VECTORS_FILE, "segment fingerprint differs from manifest"));
        }
        Ok(engine)
    }

    /// Serialized data files followed by the manifest that commits them.
    pub fn encode_files(&self) -> Vec<(&'static str, Vec<u8>)> {
        let mapping = self.mapping.encode();
        let (dat, idx) = self.docs.encode(&self.mapping);
        let vectors = segment::encode(&self.index);
        let mut files = vec![
            (MAPPING_FILE, mapping),
            (DOCSTORE_DATA_FILE, dat),
            (DOCSTORE_INDEX_FILE, idx),
            (VECTORS_FILE, vectors),
        ];
        let manifest = IndexManifest {
            format_version: FORMAT_VERSION,
            chunking: self.config.chunking,
            embedder: self.config.embedder.clone(),
            fingerprint: self.index.fingerprint().to_owned(),
            backend: self.config.backend,
            index: self.config.index,
            counts: self.counts(),
            corpus_hash: format!("{:016x}", self.docs.corpus_hash()),
            corpus_root: self.corpus_root.clone(),
            files: files
                .iter()
                .map(|(n, b)| ((*n).to_owned(), FileDigest::of(b)))
                .collect(),
        };
        files.push((MANIFEST_FILE, manifest.to_bytes()));
        files
    }

    pub(crate) fn writable_dir(&self) -> Result<&Path> {
        match (&self.dir, &self.lock) {
            (Some(d), Some(_)) => Ok(d),
            (Some(d), None) => Err(Error::Contract(format!("{} is open read-only", d.display()))),
            _ => Err(Error::Contract("engine has no index directory".into())),
        }
    }

    /// Commits the current state to the index directory.
    pub fn persist(&self) -> Result<()> {
        let dir = self.writable_dir()?;
        let files = self.encode_files();
        let refs: Vec<(&str, &[u8])> = files.iter().map(|(n, b)| (*n, b.as_slice())).collect();
        storage::commit_files(dir, &refs)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn mapping(&self) -> &ParentMapping {
        &self.mapping
    }

    pub fn docs(&self) -> &DocStore {
        &self.docs
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    /// Fingerprint of the vectors in the index.
    pub fn fingerprint(&self) -> &str {
        self.index.fingerprint()
    }

    pub fn corpus_hash(&self) -> u64 {
        self.docs.corpus_hash()
    }

    pub fn counts(&self) -> Counts {
        Counts {
            documents: self.docs.document_count(),
            search_chunks: self.index.len(),
            retrieve_chunks: self.docs.chunk_count(),
        }
    }

    pub fn stats(&self) -> StorageStats {
        let c = self.counts();
        StorageStats {
            documents: c.documents,
            search_chunks: c.search_chunks,
            retrieve_chunks: c.retrieve_chunks,
            dim: self.index.dim(),
            embedding_bytes: c.search_chunks * self.index.dim() * 4,
            mapping_bytes: self.mapping.size_bytes(),
            text_bytes: self.docs.compressed_bytes(),
        }
    }

    /// Cross-checks the index, mapping and document store.
    pub fn audit(&self) -> AuditReport {
        let mut problems = Vec::new();
        let mut note = |p: String| {
            if problems.len() < 50 {
                problems.push(p);
            }
        };
        let mut live = 0;
        for id in self.index.live_ids() {
            live += 1;
            match self.mapping.get(id) {
                None => note(format!("{id} is indexed but has no parent")),
                Some(r) if !self.docs.contains(r) => note(format!("{id} maps to missing {r}")),
                Some(_) => {}
            }
        }
        if live != self.mapping.len() {
            note(format!(
                "{} mapping entries for {live} indexed search chunks",
                self.mapping.len()
            ));
        }
        for (s, _) in self.mapping.sorted_pairs() {
            if !self.index.contains(s) {
                note(format!("{s} is mapped but not indexed"));
            }
        }
        if !self.mapping.is_consistent() {
            note("reverse mapping is not the inverse of the forward mapping".into());
        }
        let mut listed = 0;
        for (doc_id, entry) in self.docs.documents() {
            for &r in &entry.retrieve_ids {
                listed += 1;
                match self.docs.doc_of(r) {
                    Some(d) if d == doc_id => {}
                    Some(d) => note(format!("{r} listed under {doc_id} but stored for {d}")),
                    None => note(format!("{r} listed under {doc_id} but not stored")),
                }
                if self.mapping.children(r).is_empty() {
                    note(format!("{r} has no search chunks"));
                }
            }
        }
        if listed != self.docs.chunk_count() {
            note(format!(
                "{} stored retrieve chunks but {listed} listed by documents",
                self.docs.chunk_count()
            ));
        }
        if self.mapping.parent_count() != self.docs.chunk_count() {
            note(format!(
                "{} parents in the mapping for {} stored retrieve chunks",
                self.mapping.parent_count(),
                self.docs.chunk_count()
            ));
        }
        let c = self.counts();
        AuditReport {
            documents: c.documents,
            search_chunks: c.search_chunks,
            retrieve_chunks: c.retrieve_chunks,
            problems,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs() -> Vec<Document> {
        let para = |w: &str, n: usize| vec![w; n].join(" ");
        vec![
            Document::new("a.txt", "a.txt", &format!("{}\n\n{}", para("alpha", 120), para("beta", 300))).unwrap(),
            Document::new("b.txt", "b.txt", &para("gamma", 40)).unwrap(),
            Document::new("empty.txt", "empty.txt", "").unwrap(),
        ]
    }

    #[test]
    fn build_is_total_and_clean() {
        let e = Engine::build(EngineConfig::default(), &docs()).unwrap();
        let audit = e.audit();
        assert!(audit.is_clean(), "{:?}", audit.problems);
        assert_eq!(audit.documents, 3);
        assert_eq!(e.counts().retrieve_chunks, 2);
        assert!(e.counts().search_chunks >= 5);
    }

    #[test]
    fn duplicate_doc_ids_are_rejected() {
        let mut d = docs();
        d.push(d[0].clone());
        assert!(matches!(Engine::build(EngineConfig::default(), &d), Err(Error::Conflict(_))));
    }

    #[test]
    fn persist_open_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("idx");
        let e = Engine::create(&dir, EngineConfig::default(), &docs(), None, false).unwrap();
        let files = e.encode_files();
        drop(e);
        let back = Engine::open(&dir).unwrap();
        assert_eq!(back.encode_files(), files);
        assert!(back.audit().is_clean());
        assert!(back.persist().is_err(), "read-only engines cannot commit");

        assert!(matches!(
            Engine::create(&dir, EngineConfig::default(), &docs(), None, false),
            Err(Error::IndexExists(_))
        ));
        Engine::create(&dir, EngineConfig::default(), &docs()[..1], None, true).unwrap();
        assert_eq!(Engine::open(&dir).unwrap().counts().documents, 1);
    }

    #[test]
    fn tampered_file_is_detected() {
        let tmp = tempfile::tempdir().unwrap();
        Engine::create(tmp.path(), EngineConfig::default(), &docs(), None, false).unwrap();
        let p = tmp.path().join(MAPPING_FILE);
        let mut b = std::fs::read(&p).unwrap();
        b[20] ^= 0xff;
        std::fs::write(&p, b).unwrap();
        assert!(matches!(Engine::open(tmp.path()), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn missing_index_is_not_found() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(Engine::open(tmp.path()), Err(Error::NotFound(_))));
    }
}
