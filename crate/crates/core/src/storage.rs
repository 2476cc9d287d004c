//! Parent mapping, document store, manifest and the on-disk commit protocol.
//!
//! Everything lives in memory while an index is open. A commit serializes the
//! full state into `*.tmp` files, records the set in `commit.journal`, then
//! renames them into place with the manifest last. Recovery rolls a journaled
//! commit forward and discards stray temporaries otherwise.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh64::{xxh64, Xxh64};

use crate::chunker::{ChunkingConfig, RetrieveChunk};
use crate::embedding::EmbedderSpec;
use crate::error::{Error, Result};
use crate::ids::{RetrieveId, SearchId};
use crate::ingest::TokenSpan;
use crate::vector_index::{Backend, HnswParams};

pub const FORMAT_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MAPPING_FILE: &str = "mapping.log";
pub const DOCSTORE_DATA_FILE: &str = "docstore.dat";
pub const DOCSTORE_INDEX_FILE: &str = "docstore.idx";
pub const VECTORS_FILE: &str = "vectors.seg";
pub const LOCK_FILE: &str = "LOCK";
pub const JOURNAL_FILE: &str = "commit.journal";

const MAPPING_MAGIC: &[u8; 8] = b"SINRMAP\0";
const DOCDATA_MAGIC: &[u8; 8] = b"SINRDOCD";
const DOCIDX_MAGIC: &[u8; 8] = b"SINRDIDX";

/// Bytes before the first mapping record.
pub const MAPPING_HEADER_BYTES: usize = 16;
/// One serialized `(search id, retrieve id)` pair.
pub const MAPPING_RECORD_BYTES: usize = 16;
const COMPRESSION_LEVEL: u32 = 6;

fn header(magic: &[u8; 8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out
}

fn check_header(bytes: &[u8], magic: &[u8; 8], file: &str) -> Result<()> {
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(Error::corrupt(file, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::corrupt(file, format!("unsupported format version {version}")));
    }
    Ok(())
}

/// Forward (child to parent) and reverse (parent to children) maps.
///
/// Reverse lists are kept sorted by search id, so rebuilding them from the
/// forward map yields an identical structure.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParentMapping {
    forward: HashMap<SearchId, RetrieveId>,
    reverse: HashMap<RetrieveId, Vec<SearchId>>,
}

impl ParentMapping {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn lookup_parent(&self, id: SearchId) -> Result<RetrieveId> {
        self.forward
            .get(&id)
            .copied()
            .ok_or_else(|| Error::NotFound(format!("no parent recorded for {id}")))
    }

    pub fn get(&self, id: SearchId) -> Option<RetrieveId> {
        self.forward.get(&id).copied()
    }

    pub fn children(&self, parent: RetrieveId) -> &[SearchId] {
        self.reverse.get(&parent).map_or(&[], Vec::as_slice)
    }

    pub fn parent_count(&self) -> usize {
        self.reverse.len()
    }

    /// Forward entries sorted by search id.
    pub fn sorted_pairs(&self) -> Vec<(SearchId, RetrieveId)> {
        let mut v: Vec<_> = self.forward.iter().map(|(&s, &r)| (s, r)).collect();
        v.sort_unstable();
        v
    }

    fn check_pairs(&self, pairs: &[(SearchId, RetrieveId)]) -> Result<()> {
        let mut batch: HashMap<SearchId, RetrieveId> = HashMap::with_capacity(pairs.len());
        for &(s, r) in pairs {
            let existing = self.forward.get(&s).or_else(|| batch.get(&s));
            if let Some(&prev) = existing {
                if prev != r {
                    return Err(Error::Conflict(format!(
                        "{s} already maps to {prev}, refusing to re-parent it to {r}"
                    )));
                }
            }
            batch.insert(s, r);
        }
        Ok(())
    }

    /// Inserts pairs all-or-nothing. Identical pairs are no-ops; returns the
    /// search ids that were actually added.
    pub fn put_mapping(&mut self, pairs: &[(SearchId, RetrieveId)]) -> Result<Vec<SearchId>> {
        self.check_pairs(pairs)?;
        let mut added = Vec::new();
        for &(s, r) in pairs {
            if self.forward.insert(s, r).is_none() {
                let list = self.reverse.entry(r).or_default();
                let pos = list.binary_search(&s).unwrap_err();
                list.insert(pos, s);
                added.push(s);
            }
        }
        Ok(added)
    }

    pub fn remove(&mut self, id: SearchId) -> Option<RetrieveId> {
        let r = self.forward.remove(&id)?;
        if let Some(list) = self.reverse.get_mut(&r) {
            if let Ok(pos) = list.binary_search(&id) {
                list.remove(pos);
            }
            if list.is_empty() {
                self.reverse.remove(&r);
            }
        }
        Some(r)
    }

    /// Removes every child of `parent`, returning them.
    pub fn remove_parent(&mut self, parent: RetrieveId) -> Vec<SearchId> {
        let children = self.reverse.remove(&parent).unwrap_or_default();
        for s in &children {
            self.forward.remove(s);
        }
        children
    }

    pub fn rebuild_reverse(&self) -> HashMap<RetrieveId, Vec<SearchId>> {
        let mut rev: HashMap<RetrieveId, Vec<SearchId>> = HashMap::new();
        for (&s, &r) in &self.forward {
            rev.entry(r).or_default().push(s);
        }
        for list in rev.values_mut() {
            list.sort_unstable();
        }
        rev
    }

    /// True when the reverse map is exactly the inverse of the forward map.
    pub fn is_consistent(&self) -> bool {
        self.rebuild_reverse() == self.reverse
    }

    pub fn encode(&self) -> Vec<u8> {
        let pairs = self.sorted_pairs();
        let mut out = header(MAPPING_MAGIC);
        out.reserve(pairs.len() * MAPPING_RECORD_BYTES);
        for (s, r) in pairs {
            out.extend_from_slice(&s.to_le_bytes());
            out.extend_from_slice(&r.to_le_bytes());
        }
        out
    }

    /// Replays a mapping log. A later record for the same search id must
    /// agree with the earlier one.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        check_header(bytes, MAPPING_MAGIC, MAPPING_FILE)?;
        let body = &bytes[MAPPING_HEADER_BYTES..];
        if !body.len().is_multiple_of(MAPPING_RECORD_BYTES) {
            return Err(Error::corrupt(MAPPING_FILE, "partial record"));
        }
        let pairs: Vec<(SearchId, RetrieveId)> = body
            .chunks_exact(MAPPING_RECORD_BYTES)
            .map(|rec| {
                (
                    SearchId::from_le_bytes(rec[..8].try_into().unwrap()),
                    RetrieveId::from_le_bytes(rec[8..].try_into().unwrap()),
                )
            })
            .collect();
        let mut m = ParentMapping::new();
        m.put_mapping(&pairs)
            .map_err(|e| Error::corrupt(MAPPING_FILE, e.to_string()))?;
        Ok(m)
    }

    /// Size of the serialized forward map.
    pub fn size_bytes(&self) -> usize {
        mapping_size_bytes(self.len())
    }
}

pub fn mapping_size_bytes(entries: usize) -> usize {
    MAPPING_HEADER_BYTES + MAPPING_RECORD_BYTES * entries
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredRetrieveChunk {
    pub retrieve_id: RetrieveId,
    pub doc_id: String,
    pub span: TokenSpan,
    pub ordinal: usize,
    pub sibling_count: usize,
    pub text: String,
}

impl StoredRetrieveChunk {
    pub fn token_count(&self) -> usize {
        self.span.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ChunkEntry {
    doc_id: String,
    span: TokenSpan,
    compressed: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocEntry {
    pub content_hash: u64,
    /// Retrieve chunks in document order.
    pub retrieve_ids: Vec<RetrieveId>,
}

fn compress(text: &str) -> Vec<u8> {
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::new(COMPRESSION_LEVEL));
    enc.write_all(text.as_bytes()).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail")
}

fn decompress(bytes: &[u8]) -> Result<String> {
    let mut s = String::new();
    DeflateDecoder::new(bytes)
        .read_to_string(&mut s)
        .map_err(|e| Error::corrupt(DOCSTORE_DATA_FILE, e.to_string()))?;
    Ok(s)
}

/// Retrieve-chunk text, compressed at rest, plus the per-document table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DocStore {
    docs: BTreeMap<String, DocEntry>,
    chunks: HashMap<RetrieveId, ChunkEntry>,
}

impl DocStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn document_count(&self) -> usize {
        self.docs.len()
    }

    pub fn chunk_count(&self) -> usize {
        self.chunks.len()
    }

    pub fn document(&self, doc_id: &str) -> Option<&DocEntry> {
        self.docs.get(doc_id)
    }

    pub fn documents(&self) -> impl Iterator<Item = (&str, &DocEntry)> {
        self.docs.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn contains(&self, id: RetrieveId) -> bool {
        self.chunks.contains_key(&id)
    }

    pub fn span(&self, id: RetrieveId) -> Option<TokenSpan> {
        self.chunks.get(&id).map(|c| c.span)
    }

    pub fn doc_of(&self, id: RetrieveId) -> Option<&str> {
        self.chunks.get(&id).map(|c| c.doc_id.as_str())
    }

    pub fn compressed_bytes(&self) -> usize {
        self.chunks.values().map(|c| c.compressed.len()).sum()
    }

    /// Adds or replaces the document table entry. Chunks already stored
    /// under the same id are kept; `chunks` must cover every id in the new
    /// list that is not yet stored.
    pub(crate) fn put_document(
        &mut self,
        doc_id: &str,
        content_hash: u64,
        retrieve_ids: Vec<RetrieveId>,
        chunks: &[RetrieveChunk],
    ) -> Result<Option<DocEntry>> {
        for c in chunks {
            if c.doc_id != doc_id {
                return Err(Error::Contract(format!(
                    "chunk {} belongs to {}, not {doc_id}",
                    c.retrieve_id, c.doc_id
                )));
            }
            if let Some(existing) = self.chunks.get(&c.retrieve_id) {
                if existing.doc_id != c.doc_id || existing.span != c.span {
                    return Err(Error::Conflict(format!("retrieve id collision on {}", c.retrieve_id)));
                }
            }
        }
        for c in chunks {
            self.chunks.entry(c.retrieve_id).or_insert_with(|| ChunkEntry {
                doc_id: c.doc_id.clone(),
                span: c.span,
                compressed: compress(&c.text),
            });
        }
        if let Some(missing) = retrieve_ids.iter().find(|r| !self.chunks.contains_key(r)) {
            return Err(Error::Contract(format!("document {doc_id} lists unknown chunk {missing}")));
        }
        Ok(self.docs.insert(
            doc_id.to_owned(),
            DocEntry {
                content_hash,
                retrieve_ids,
            },
        ))
    }

    pub(crate) fn remove_chunk(&mut self, id: RetrieveId) -> Option<(String, TokenSpan, Vec<u8>)> {
        self.chunks.remove(&id).map(|c| (c.doc_id, c.span, c.compressed))
    }

    pub(crate) fn restore_chunk(&mut self, id: RetrieveId, doc_id: String, span: TokenSpan, compressed: Vec<u8>) {
        self.chunks.insert(
            id,
            ChunkEntry {
                doc_id,
                span,
                compressed,
            },
        );
    }

    pub(crate) fn set_doc_entry(&mut self, doc_id: &str, entry: Option<DocEntry>) -> Option<DocEntry> {
        match entry {
            Some(e) => self.docs.insert(doc_id.to_owned(), e),
            None => self.docs.remove(doc_id),
        }
    }

    /// Fetches chunks in input order. Ids not in the store are returned in
    /// the second list.
    pub fn get_retrieve_chunks(
        &self,
        ids: &[RetrieveId],
        mapping: &ParentMapping,
    ) -> Result<(Vec<StoredRetrieveChunk>, Vec<RetrieveId>)> {
        let mut found = Vec::with_capacity(ids.len());
        let mut missing = Vec::new();
        for &id in ids {
            let Some(c) = self.chunks.get(&id) else {
                missing.push(id);
                continue;
            };
            let ordinal = self
                .docs
                .get(&c.doc_id)
                .and_then(|d| d.retrieve_ids.iter().position(|&r| r == id))
                .unwrap_or(0);
            found.push(StoredRetrieveChunk {
                retrieve_id: id,
                doc_id: c.doc_id.clone(),
                span: c.span,
                ordinal,
                sibling_count: mapping.children(id).len(),
                text: decompress(&c.compressed)?,
            });
        }
        Ok((found, missing))
    }

    /// Hash over the sorted `(doc_id, content hash)` table.
    pub fn corpus_hash(&self) -> u64 {
        corpus_hash(self.docs.iter().map(|(d, e)| (d.as_str(), e.content_hash)))
    }

    /// Serializes to `(docstore.dat, docstore.idx)`. Sibling counts are
    /// taken from `mapping`.
    pub fn encode(&self, mapping: &ParentMapping) -> (Vec<u8>, Vec<u8>) {
        let mut dat = header(DOCDATA_MAGIC);
        let mut idx = header(DOCIDX_MAGIC);
        idx.extend_from_slice(&(self.docs.len() as u64).to_le_bytes());
        for (doc_id, e) in &self.docs {
            idx.extend_from_slice(&(doc_id.len() as u32).to_le_bytes());
            idx.extend_from_slice(doc_id.as_bytes());
            idx.extend_from_slice(&e.content_hash.to_le_bytes());
            idx.extend_from_slice(&(e.retrieve_ids.len() as u32).to_le_bytes());
            for &r in &e.retrieve_ids {
                let c = &self.chunks[&r];
                idx.extend_from_slice(&r.to_le_bytes());
                idx.extend_from_slice(&(dat.len() as u64).to_le_bytes());
                idx.extend_from_slice(&(c.compressed.len() as u32).to_le_bytes());
                idx.extend_from_slice(&(c.span.start as u64).to_le_bytes());
                idx.extend_from_slice(&(c.span.end as u64).to_le_bytes());
                idx.extend_from_slice(&(mapping.children(r).len() as u32).to_le_bytes());
                dat.extend_from_slice(&c.compressed);
            }
        }
        let sum = xxh64(&idx, 0);
        idx.extend_from_slice(&sum.to_le_bytes());
        (dat, idx)
    }

    /// Decodes both files, checking stored sibling counts against `mapping`.
    pub fn decode(dat: &[u8], idx: &[u8], mapping: &ParentMapping) -> Result<Self> {
        const F: &str = DOCSTORE_INDEX_FILE;
        check_header(dat, DOCDATA_MAGIC, DOCSTORE_DATA_FILE)?;
        check_header(idx, DOCIDX_MAGIC, F)?;
        let (body, trailer) = idx.split_at(idx.len() - 8);
        if xxh64(body, 0) != u64::from_le_bytes(trailer.try_into().unwrap()) {
            return Err(Error::corrupt(F, "checksum mismatch"));
        }
        let mut pos = 16;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = body
                .get(pos..pos + n)
                .ok_or_else(|| Error::corrupt(F, format!("truncated at byte {pos}")))?;
            pos += n;
            Ok(s)
        };
        fn u32_at(b: &[u8]) -> u32 {
            u32::from_le_bytes(b.try_into().unwrap())
        }
        fn u64_at(b: &[u8]) -> u64 {
            u64::from_le_bytes(b.try_into().unwrap())
        }
        let mut store = DocStore::new();
        let ndocs = u64_at(take(8)?);
        for _ in 0..ndocs {
            let len = u32_at(take(4)?) as usize;
            let doc_id = std::str::from_utf8(take(len)?)
                .map_err(|_| Error::corrupt(F, "doc id is not utf-8"))?
                .to_owned();
            let content_hash = u64_at(take(8)?);
            let nchunks = u32_at(take(4)?);
            let mut ids = Vec::with_capacity(nchunks as usize);
            for _ in 0..nchunks {
                let r = RetrieveId(u64_at(take(8)?));
                let off = u64_at(take(8)?) as usize;
                let clen = u32_at(take(4)?) as usize;
                let start = u64_at(take(8)?) as usize;
                let end = u64_at(take(8)?) as usize;
                let siblings = u32_at(take(4)?) as usize;
                let blob = dat
                    .get(off..off + clen)
                    .ok_or_else(|| Error::corrupt(DOCSTORE_DATA_FILE, format!("chunk {r} out of range")))?;
                if siblings != mapping.children(r).len() {
                    return Err(Error::corrupt(
                        F,
                        format!("sibling count {siblings} for {r} disagrees with mapping"),
                    ));
                }
                let span = TokenSpan::new(start, end).map_err(|e| Error::corrupt(F, e.to_string()))?;
                if store.chunks.contains_key(&r) {
                    return Err(Error::corrupt(F, format!("duplicate chunk {r}")));
                }
                store.chunks.insert(
                    r,
                    ChunkEntry {
                        doc_id: doc_id.clone(),
                        span,
                        compressed: blob.to_vec(),
                    },
                );
                ids.push(r);
            }
            store.docs.insert(
                doc_id,
                DocEntry {
                    content_hash,
                    retrieve_ids: ids,
                },
            );
        }
        if pos != body.len() {
            return Err(Error::corrupt(F, "trailing bytes"));
        }
        Ok(store)
    }
}

/// Hash over `(doc_id, content hash)` pairs, which must be sorted by doc id.
pub fn corpus_hash<'a>(docs: impl IntoIterator<Item = (&'a str, u64)>) -> u64 {
    let mut h = Xxh64::new(0);
    for (doc_id, content) in docs {
        h.update(&(doc_id.len() as u64).to_le_bytes());
        h.update(doc_id.as_bytes());
        h.update(&content.to_le_bytes());
    }
    h.digest()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub documents: usize,
    pub search_chunks: usize,
    pub retrieve_chunks: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub bytes: u64,
    pub xxh64: String,
}

impl FileDigest {
    pub fn of(bytes: &[u8]) -> Self {
        Self {
            bytes: bytes.len() as u64,
            xxh64: format!("{:016x}", xxh64(bytes, 0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexManifest {
    pub format_version: u32,
    pub chunking: ChunkingConfig,
    pub embedder: EmbedderSpec,
    /// Fingerprint of the vectors stored in the index.
    pub fingerprint: String,
    pub backend: Backend,
    pub index: HnswParams,
    pub counts: Counts,
    pub corpus_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_root: Option<String>,
    /// Digests of the data files this manifest commits.
    pub files: BTreeMap<String, FileDigest>,
}

impl IndexManifest {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("manifest serializes");
        v.push(b'\n');
        v
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let m: IndexManifest =
            serde_json::from_slice(bytes).map_err(|e| Error::corrupt(MANIFEST_FILE, e.to_string()))?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::corrupt(
                MANIFEST_FILE,
                format!("unsupported format version {}", m.format_version),
            ));
        }
        Ok(m)
    }

    pub fn verify(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let want = self
            .files
            .get(name)
            .ok_or_else(|| Error::corrupt(MANIFEST_FILE, format!("no digest for {name}")))?;
        if *want != FileDigest::of(bytes) {
            return Err(Error::corrupt(name, "contents do not match the manifest digest"));
        }
        Ok(())
    }
}

/// Exclusive writer lock on an index directory; released on drop.
#[derive(Debug)]
pub struct WriterLock {
    _file: File,
    path: PathBuf,
}

impl WriterLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        match file.try_lock() {
            Ok(()) => Ok(Self { _file: file, path }),
            Err(fs::TryLockError::WouldBlock) => Err(Error::Locked(dir.to_path_buf())),
            Err(fs::TryLockError::Error(e)) => Err(Error::io(&path, e)),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

fn tmp_name(name: &str) -> String {
    format!("{name}.tmp")
}

fn write_synced(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

fn sync_dir(dir: &Path) {
    // Not every platform allows opening a directory for syncing.
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
}

/// Writes every file as a temporary. Nothing visible to readers changes.
pub fn stage_files(dir: &Path, files: &[(&str, &[u8])]) -> Result<()> {
    for (name, bytes) in files {
        write_synced(&dir.join(tmp_name(name)), bytes)?;
    }
    Ok(())
}

/// Removes staged temporaries without committing them.
pub fn discard_staged(dir: &Path, names: &[&str]) {
    for name in names {
        let _ = fs::remove_file(dir.join(tmp_name(name)));
    }
}

/// Publishes staged files. `names` must end with the manifest.
pub fn publish_staged(dir: &Path, names: &[&str]) -> Result<()> {
    let journal = dir.join(JOURNAL_FILE);
    let list = serde_json::to_vec(names).expect("names serialize");
    write_synced(&journal, &list)?;
    sync_dir(dir);
    roll_forward(dir, names)?;
    fs::remove_file(&journal).map_err(|e| Error::io(&journal, e))?;
    sync_dir(dir);
    Ok(())
}

pub fn commit_files(dir: &Path, files: &[(&str, &[u8])]) -> Result<()> {
    stage_files(dir, files)?;
    let names: Vec<&str> = files.iter().map(|(n, _)| *n).collect();
    publish_staged(dir, &names)
}

fn roll_forward(dir: &Path, names: &[&str]) -> Result<()> {
    for name in names {
        let tmp = dir.join(tmp_name(name));
        if tmp.exists() {
            fs::rename(&tmp, dir.join(name)).map_err(|e| Error::io(&tmp, e))?;
        }
    }
    Ok(())
}

/// Completes or discards an interrupted commit. Requires the writer lock.
pub fn recover(dir: &Path, _lock: &WriterLock) -> Result<()> {
    let journal = dir.join(JOURNAL_FILE);
    if journal.exists() {
        let bytes = fs::read(&journal).map_err(|e| Error::io(&journal, e))?;
        match serde_json::from_slice::<Vec<String>>(&bytes) {
            Ok(names) => {
                log::warn!("rolling forward interrupted commit in {}", dir.display());
                let names: Vec<&str> = names.iter().map(String::as_str).collect();
                roll_forward(dir, &names)?;
            }
            // A torn journal means the renames never started.
            Err(_) => log::warn!("discarding torn commit journal in {}", dir.display()),
        }
        fs::remove_file(&journal).map_err(|e| Error::io(&journal, e))?;
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries.flatten() {
        let p = entry.path();
        if p.extension().is_some_and(|x| x == "tmp") {
            let _ = fs::remove_file(&p);
        }
    }
    sync_dir(dir);
    Ok(())
}

pub fn read_file(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let p = dir.join(name);
    fs::read(&p).map_err(|e| Error::io(&p, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chunk(doc: &str, id: u64, start: usize, end: usize, text: &str) -> RetrieveChunk {
        RetrieveChunk {
            retrieve_id: RetrieveId(id),
            doc_id: doc.into(),
            span: TokenSpan::new(start, end).unwrap(),
            text: text.into(),
            ordinal: 0,
        }
    }

    #[test]
    fn three_children_share_a_parent() {
        let mut m = ParentMapping::new();
        let r = RetrieveId(4);
        m.put_mapping(&[(SearchId(1), r), (SearchId(2), r), (SearchId(3), r)]).unwrap();
        assert_eq!(m.children(r), &[SearchId(1), SearchId(2), SearchId(3)]);
        assert_eq!(m.lookup_parent(SearchId(2)).unwrap(), r);
        assert!(m.is_consistent());
    }

    #[test]
    fn put_is_idempotent_and_atomic() {
        let mut m = ParentMapping::new();
        m.put_mapping(&[]).unwrap();
        assert!(m.is_empty());
        let pairs = [(SearchId(1), RetrieveId(10)), (SearchId(2), RetrieveId(10))];
        m.put_mapping(&pairs).unwrap();
        let snapshot = m.clone();
        assert!(m.put_mapping(&pairs).unwrap().is_empty());
        assert_eq!(m, snapshot);

        let bad = [(SearchId(3), RetrieveId(11)), (SearchId(1), RetrieveId(12))];
        assert!(matches!(m.put_mapping(&bad), Err(Error::Conflict(_))));
        assert_eq!(m, snapshot, "a rejected batch leaves no trace");
        let self_conflict = [(SearchId(5), RetrieveId(1)), (SearchId(5), RetrieveId(2))];
        assert!(m.put_mapping(&self_conflict).is_err());
    }

    #[test]
    fn lookup_on_empty_is_not_found() {
        assert!(matches!(ParentMapping::new().lookup_parent(SearchId(1)), Err(Error::NotFound(_))));
    }

    #[test]
    fn mapping_size_is_sixteen_bytes_per_entry() {
        let mut m = ParentMapping::new();
        assert_eq!(m.encode().len(), MAPPING_HEADER_BYTES);
        let pairs: Vec<_> = (0..1000).map(|i| (SearchId(i), RetrieveId(i / 7))).collect();
        m.put_mapping(&pairs).unwrap();
        let bytes = m.encode();
        assert_eq!(bytes.len(), 16_000 + MAPPING_HEADER_BYTES);
        assert_eq!(m.size_bytes(), bytes.len());
        assert_eq!(ParentMapping::decode(&bytes).unwrap(), m);
    }

    #[test]
    fn fetch_preserves_order_duplicates_and_reports_missing() {
        let mut store = DocStore::new();
        let m = ParentMapping::new();
        let c1 = chunk("a", 1, 0, 3, "alpha beta gamma");
        let c2 = chunk("a", 2, 3, 5, "delta epsilon");
        store.put_document("a", 9, vec![c1.retrieve_id, c2.retrieve_id], &[c1, c2]).unwrap();
        let (found, missing) = store.get_retrieve_chunks(&[], &m).unwrap();
        assert!(found.is_empty() && missing.is_empty());
        let (found, missing) = store
            .get_retrieve_chunks(&[RetrieveId(2), RetrieveId(7), RetrieveId(2)], &m)
            .unwrap();
        assert_eq!(found.len(), 2);
        assert_eq!(found[0].text, "delta epsilon");
        assert_eq!(found[0].ordinal, 1);
        assert_eq!(found[1], found[0]);
        assert_eq!(missing, vec![RetrieveId(7)]);
    }

    #[test]
    fn docstore_round_trip_and_sibling_check() {
        let mut store = DocStore::new();
        let mut m = ParentMapping::new();
        let c = chunk("d", 5, 0, 2, "hello world");
        store.put_document("d", 1, vec![c.retrieve_id], &[c]).unwrap();
        m.put_mapping(&[(SearchId(1), RetrieveId(5)), (SearchId(2), RetrieveId(5))]).unwrap();
        let (dat, idx) = store.encode(&m);
        let back = DocStore::decode(&dat, &idx, &m).unwrap();
        assert_eq!(back, store);
        m.remove(SearchId(1));
        assert!(DocStore::decode(&dat, &idx, &m).is_err());
    }

    #[test]
    fn retrieve_id_collision_is_detected() {
        let mut store = DocStore::new();
        store.put_document("a", 1, vec![RetrieveId(1)], &[chunk("a", 1, 0, 1, "x")]).unwrap();
        let err = store.put_document("b", 1, vec![RetrieveId(1)], &[chunk("b", 1, 0, 1, "x")]);
        assert!(matches!(err, Err(Error::Conflict(_))));
    }

    #[test]
    fn commit_and_recovery() {
        let dir = tempfile::tempdir().unwrap();
        let lock = WriterLock::acquire(dir.path()).unwrap();
        assert!(matches!(WriterLock::acquire(dir.path()), Err(Error::Locked(_))));

        commit_files(dir.path(), &[("a.bin", b"one"), (MANIFEST_FILE, b"{}")]).unwrap();
        assert_eq!(read_file(dir.path(), "a.bin").unwrap(), b"one");

        // staged but unpublished: recovery discards it
        stage_files(dir.path(), &[("a.bin", b"two")]).unwrap();
        recover(dir.path(), &lock).unwrap();
        assert_eq!(read_file(dir.path(), "a.bin").unwrap(), b"one");
        assert!(!dir.path().join("a.bin.tmp").exists());

        // staged and journaled: recovery rolls forward
        stage_files(dir.path(), &[("a.bin", b"three")]).unwrap();
        fs::write(dir.path().join(JOURNAL_FILE), br#"["a.bin"]"#).unwrap();
        recover(dir.path(), &lock).unwrap();
        assert_eq!(read_file(dir.path(), "a.bin").unwrap(), b"three");
        assert!(!dir.path().join(JOURNAL_FILE).exists());

        drop(lock);
        WriterLock::acquire(dir.path()).unwrap();
    }

    proptest! {
        #[test]
        fn text_round_trips_through_compression(text in "\\PC{0,400}") {
            prop_assert_eq!(decompress(&compress(&text)).unwrap(), text);
        }

        #[test]
        fn reverse_always_inverts_forward(
            ops in proptest::collection::vec((0u64..40, 0u64..6, any::<bool>()), 0..120)
        ) {
            let mut m = ParentMapping::new();
            for (s, r, insert) in ops {
                if insert {
                    let _ = m.put_mapping(&[(SearchId(s), RetrieveId(r))]);
                } else if s % 3 == 0 {
                    m.remove_parent(RetrieveId(r));
                } else {
                    m.remove(SearchId(s));
                }
                prop_assert!(m.is_consistent());
            }
            prop_assert_eq!(ParentMapping::decode(&m.encode()).unwrap(), m);
        }
    }
}
