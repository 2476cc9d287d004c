//! Search-chunk vector index.
//!
//! One [`VectorIndex`] type serves two backends: an HNSW graph for
//! sub-linear queries and an exact scan used as oracle and fallback. Both
//! report the same exact cosine scores and break ties by search id, so their
//! outputs are directly comparable.
//!
//! Deletes are tombstones. Once more than [`COMPACTION_THRESHOLD`] of the
//! slots are tombstoned the live entries are rebuilt into a fresh graph.
//!
//! Mutations can be wrapped in a transaction ([`VectorIndex::begin`]); the
//! undo journal restores the exact prior state on rollback.

mod hnsw;
pub mod segment;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, EmbeddingVector};
use crate::error::{Error, Result};
use crate::ids::SearchId;
use hnsw::{level_for, Graph, LinkJournal};

pub const COMPACTION_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Hnsw,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HnswParams {
    pub max_links: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub level_seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self {
            max_links: 16,
            ef_construction: 200,
            ef_search: 100,
            level_seed: 0x5eed_5eed,
        }
    }
}

impl HnswParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_links < 2 {
            return Err(Error::Config(format!("max_links must be >= 2, got {}", self.max_links)));
        }
        if self.ef_construction == 0 || self.ef_search == 0 {
            return Err(Error::Config("ef_construction and ef_search must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexedVector {
    pub search_id: SearchId,
    pub vector: EmbeddingVector,
    pub tombstone: bool,
}

impl IndexedVector {
    pub fn live(search_id: SearchId, vector: EmbeddingVector) -> Self {
        Self {
            search_id,
            vector,
            tombstone: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub search_id: SearchId,
    pub score: f32,
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f32 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f32>() + tail
}

fn inv_norm(v: &[f32]) -> f32 {
    let n = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if n == 0.0 {
        0.0
    } else {
        (1.0 / n) as f32
    }
}

/// Slot-major vector storage.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct VectorStore {
    pub dim: usize,
    pub ids: Vec<SearchId>,
    pub data: Vec<f32>,
    pub inv_norms: Vec<f32>,
    pub tombstones: Vec<bool>,
}

impl VectorStore {
    fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            inv_norms: Vec::new(),
            tombstones: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn vector(&self, slot: u32) -> &[f32] {
        let s = slot as usize * self.dim;
        &self.data[s..s + self.dim]
    }

    pub fn inv_norm(&self, slot: u32) -> f32 {
        self.inv_norms[slot as usize]
    }

    pub fn fast_score(&self, slot: u32, q: &[f32], q_inv: f32) -> f32 {
        dot(self.vector(slot), q) * q_inv * self.inv_norms[slot as usize]
    }

    pub fn slot_score(&self, a: u32, b: u32) -> f32 {
        dot(self.vector(a), self.vector(b)) * self.inv_norms[a as usize] * self.inv_norms[b as usize]
    }

    fn push(&mut self, id: SearchId, values: &[f32], tombstone: bool) -> u32 {
        let slot = self.ids.len() as u32;
        self.ids.push(id);
        self.data.extend_from_slice(values);
        self.inv_norms.push(inv_norm(values));
        self.tombstones.push(tombstone);
        slot
    }

    fn truncate(&mut self, len: usize) {
        self.ids.truncate(len);
        self.data.truncate(len * self.dim);
        self.inv_norms.truncate(len);
        self.tombstones.truncate(len);
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Core {
    store: VectorStore,
    graph: Graph,
    /// Most recent slot per id, live or tombstoned.
    slots: HashMap<SearchId, u32>,
    live: usize,
}

enum Undo {
    Links { slot: u32, layer: u8, old: Vec<u32> },
    Tombstone { slot: u32, old: bool },
    Slot { id: SearchId, old: Option<u32> },
    Replaced(Box<Core>),
}

struct Journal {
    len: usize,
    entry: Option<u32>,
    max_level: u8,
    live: usize,
    undo: Vec<Undo>,
}

impl LinkJournal for Vec<Undo> {
    fn record_links(&mut self, slot: u32, layer: u8, old: &[u32]) {
        self.push(Undo::Links {
            slot,
            layer,
            old: old.to_vec(),
        });
    }
}

pub struct VectorIndex {
    backend: Backend,
    params: HnswParams,
    fingerprint: String,
    core: Core,
    journal: Option<Journal>,
}

impl std::fmt::Debug for VectorIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VectorIndex")
            .field("backend", &self.backend)
            .field("dim", &self.core.store.dim)
            .field("slots", &self.core.store.len())
            .field("live", &self.core.live)
            .finish()
    }
}

impl VectorIndex {
    pub fn new(dim: usize, backend: Backend, params: HnswParams) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Contract("index dimension must be positive".into()));
        }
        params.validate()?;
        Ok(Self {
            backend,
            params,
            fingerprint: String::new(),
            core: Core {
                store: VectorStore::new(dim),
                graph: Graph::default(),
                slots: HashMap::new(),
                live: 0,
            },
            journal: None,
        })
    }

    /// Builds an index from `entries` in order. All entries must share `dim`.
    pub fn build(
        dim: usize,
        backend: Backend,
        params: HnswParams,
        entries: impl IntoIterator<Item = IndexedVector>,
    ) -> Result<Self> {
        let mut idx = Self::new(dim, backend, params)?;
        for e in entries {
            idx.insert(e)?;
        }
        Ok(idx)
    }

    pub fn with_fingerprint(mut self, fingerprint: impl Into<String>) -> Self {
        self.fingerprint = fingerprint.into();
        self
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.core.store.dim
    }

    /// Number of live (non-tombstoned) entries.
    pub fn len(&self) -> usize {
        self.core.live
    }

    pub fn is_empty(&self) -> bool {
        self.core.live == 0
    }

    /// Slots in use, tombstones included.
    pub fn slot_count(&self) -> usize {
        self.core.store.len()
    }

    pub fn tombstone_fraction(&self) -> f64 {
        let n = self.core.store.len();
        if n == 0 {
            0.0
        } else {
            (n - self.core.live) as f64 / n as f64
        }
    }

    fn live_slot(&self, id: SearchId) -> Option<u32> {
        self.core
            .slots
            .get(&id)
            .copied()
            .filter(|&s| !self.core.store.tombstones[s as usize])
    }

    pub fn contains(&self, id: SearchId) -> bool {
        self.live_slot(id).is_some()
    }

    pub fn vector(&self, id: SearchId) -> Option<&[f32]> {
        self.live_slot(id).map(|s| self.core.store.vector(s))
    }

    /// Live ids in slot order.
    pub fn live_ids(&self) -> impl Iterator<Item = SearchId> + '_ {
        let store = &self.core.store;
        store
            .ids
            .iter()
            .zip(&store.tombstones)
            .filter(|(_, &t)| !t)
            .map(|(&id, _)| id)
    }

    pub fn insert(&mut self, entry: IndexedVector) -> Result<()> {
        if entry.vector.dim() != self.dim() {
            return Err(Error::Contract(format!(
                "vector for {} has dimension {}, index expects {}",
                entry.search_id,
                entry.vector.dim(),
                self.dim()
            )));
        }
        if self.contains(entry.search_id) {
            return Err(Error::Conflict(format!("{} is already indexed", entry.search_id)));
        }
        let id = entry.search_id;
        let core = &mut self.core;
        let slot = core.store.push(id, entry.vector.values(), false);
        let old = core.slots.insert(id, slot);
        if let Some(j) = self.journal.as_mut() {
            j.undo.push(Undo::Slot { id, old });
        }
        if self.backend == Backend::Hnsw {
            let level = level_for(id, self.params.level_seed, self.params.max_links);
            match self.journal.as_mut() {
                Some(j) => core.graph.insert(
                    &core.store,
                    slot,
                    level,
                    self.params.max_links,
                    self.params.ef_construction,
                    &mut j.undo,
                ),
                None => core.graph.insert(
                    &core.store,
                    slot,
                    level,
                    self.params.max_links,
                    self.params.ef_construction,
                    &mut (),
                ),
            }
        }
        core.live += 1;
        if entry.tombstone {
            self.mark_removed(slot);
        }
        Ok(())
    }

    fn mark_removed(&mut self, slot: u32) {
        let t = &mut self.core.store.tombstones[slot as usize];
        if let Some(j) = self.journal.as_mut() {
            j.undo.push(Undo::Tombstone { slot, old: *t });
        }
        *t = true;
        self.core.live -= 1;
    }

    /// Tombstones `id`, compacting when the tombstone fraction passes the
    /// threshold.
    pub fn remove(&mut self, id: SearchId) -> Result<()> {
        let slot = self
            .live_slot(id)
            .ok_or_else(|| Error::NotFound(format!("{id} is not in the index")))?;
        self.mark_removed(slot);
        self.maybe_compact();
        Ok(())
    }

    pub fn maybe_compact(&mut self) -> bool {
        if self.tombstone_fraction() > COMPACTION_THRESHOLD {
            self.compact();
            true
        } else {
            false
        }
    }

    /// Rebuilds storage and graph from the live entries, in slot order.
    pub fn compact(&mut self) {
        let mut fresh = Self::new(self.dim(), self.backend, self.params).expect("validated on creation");
        {
            let store = &self.core.store;
            for slot in 0..store.len() as u32 {
                if !store.tombstones[slot as usize] {
                    let values = store.vector(slot).to_vec();
                    fresh
                        .insert(IndexedVector::live(
                            store.ids[slot as usize],
                            EmbeddingVector::new(values).expect("dim > 0"),
                        ))
                        .expect("live ids are unique");
                }
            }
        }
        let old = std::mem::replace(&mut self.core, fresh.core);
        if let Some(j) = self.journal.as_mut() {
            j.undo.push(Undo::Replaced(Box::new(old)));
        }
    }

    pub fn query(&self, q: &EmbeddingVector, k: usize) -> Result<Vec<ScoredHit>> {
        if k == 0 {
            return Err(Error::Contract("k must be at least 1".into()));
        }
        if q.dim() != self.dim() {
            return Err(Error::Contract(format!(
                "query has dimension {}, index expects {}",
                q.dim(),
                self.dim()
            )));
        }
        if self.core.live == 0 {
            return Ok(Vec::new());
        }
        let store = &self.core.store;
        let qv = q.values();
        let slots: Vec<u32> = match self.backend {
            Backend::Exact => (0..store.len() as u32)
                .filter(|&s| !store.tombstones[s as usize])
                .collect(),
            Backend::Hnsw => {
                let q_inv = inv_norm(qv);
                let mut ef = self.params.ef_search.max(k);
                loop {
                    let live: Vec<u32> = self
                        .core
                        .graph
                        .search(store, qv, q_inv, ef)
                        .into_iter()
                        .filter(|c| !store.tombstones[c.slot as usize])
                        .map(|c| c.slot)
                        .collect();
                    if live.len() >= k.min(self.core.live) || ef >= store.len() {
                        break live;
                    }
                    ef = (ef * 2).min(store.len());
                }
            }
        };
        let mut hits: Vec<ScoredHit> = slots
            .into_iter()
            .map(|s| ScoredHit {
                search_id: store.ids[s as usize],
                score: cosine(qv, store.vector(s)),
            })
            .collect();
        sort_hits(&mut hits);
        hits.truncate(k);
        Ok(hits)
    }

    /// Starts recording an undo journal. Nested transactions are not
    /// supported.
    pub fn begin(&mut self) -> Result<()> {
        if self.journal.is_some() {
            return Err(Error::Contract("vector index transaction already open".into()));
        }
        self.journal = Some(Journal {
            len: self.core.store.len(),
            entry: self.core.graph.entry,
            max_level: self.core.graph.max_level,
            live: self.core.live,
            undo: Vec::new(),
        });
        Ok(())
    }

    pub fn commit(&mut self) {
        self.journal = None;
    }

    pub fn rollback(&mut self) {
        let Some(j) = self.journal.take() else {
            return;
        };
        for u in j.undo.into_iter().rev() {
            match u {
                Undo::Links { slot, layer, old } => {
                    self.core.graph.links[slot as usize][layer as usize] = old
                }
                Undo::Tombstone { slot, old } => self.core.store.tombstones[slot as usize] = old,
                Undo::Slot { id, old } => match old {
                    Some(s) => {
                        self.core.slots.insert(id, s);
                    }
                    None => {
                        self.core.slots.remove(&id);
                    }
                },
                Undo::Replaced(core) => self.core = *core,
            }
        }
        self.core.store.truncate(j.len);
        let g = &mut self.core.graph;
        if self.backend == Backend::Hnsw {
            g.levels.truncate(j.len);
            g.links.truncate(j.len);
        }
        g.entry = j.entry;
        g.max_level = j.max_level;
        self.core.live = j.live;
    }

    pub fn in_transaction(&self) -> bool {
        self.journal.is_some()
    }

    /// Structural equality of everything that is persisted.
    pub fn same_state(&self, other: &VectorIndex) -> bool {
        self.backend == other.backend
            && self.params == other.params
            && self.fingerprint == other.fingerprint
            && self.core == other.core
    }
}

/// Score descending, then search id ascending.
pub fn sort_hits(hits: &mut [ScoredHit]) {
    hits.sort_unstable_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.search_id.cmp(&b.search_id))
    });
}
