//! HNSW graph over the slots of a [`super::VectorStore`].
//!
//! Node levels come from a hash of the search id, so the graph depends only
//! on the insertion order and the level seed. Adjacency lists are kept sorted
//! by slot; that makes the graph canonical and lets the segment writer
//! delta-encode them without reordering.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use xxhash_rust::xxh64::xxh64;

use super::VectorStore;
use crate::ids::SearchId;

pub(crate) const MAX_LEVEL: u8 = 16;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Cand {
    pub score: f32,
    pub slot: u32,
}

impl PartialEq for Cand {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Cand {}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cand {
    /// Greater means better: higher score, then lower slot.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.slot.cmp(&self.slot))
    }
}

pub(crate) fn level_for(id: SearchId, seed: u64, max_links: usize) -> u8 {
    let h = xxh64(&id.to_le_bytes(), seed);
    // uniform in (0, 1]
    let u = ((h >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
    let ml = 1.0 / (max_links as f64).ln();
    ((-u.ln() * ml).floor() as u64).min(u64::from(MAX_LEVEL)) as u8
}

struct Visited(Vec<u64>);

impl Visited {
    fn new(n: usize) -> Self {
        Visited(vec![0; n / 64 + 1])
    }

    fn clear(&mut self) {
        self.0.iter_mut().for_each(|w| *w = 0);
    }

    /// Returns true when `slot` was not yet marked.
    fn insert(&mut self, slot: u32) -> bool {
        let (w, b) = (slot as usize / 64, slot % 64);
        let fresh = self.0[w] & (1 << b) == 0;
        self.0[w] |= 1 << b;
        fresh
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub(crate) struct Graph {
    pub levels: Vec<u8>,
    /// `links[slot][layer]`, layers `0..=levels[slot]`.
    pub links: Vec<Vec<Vec<u32>>>,
    pub entry: Option<u32>,
    pub max_level: u8,
}

/// Records the previous adjacency of a node before it is overwritten.
pub(crate) trait LinkJournal {
    fn record_links(&mut self, slot: u32, layer: u8, old: &[u32]);
}

impl LinkJournal for () {
    fn record_links(&mut self, _: u32, _: u8, _: &[u32]) {}
}

impl Graph {
    fn max_links_at(max_links: usize, layer: usize) -> usize {
        if layer == 0 {
            max_links * 2
        } else {
            max_links
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn search_layer(
        &self,
        store: &VectorStore,
        q: &[f32],
        q_inv: f32,
        entry: &[Cand],
        ef: usize,
        layer: usize,
        visited: &mut Visited,
    ) -> Vec<Cand> {
        let mut candidates: BinaryHeap<Cand> = BinaryHeap::new();
        let mut results: BinaryHeap<Reverse<Cand>> = BinaryHeap::new();
        for &c in entry {
            if visited.insert(c.slot) {
                candidates.push(c);
                results.push(Reverse(c));
            }
        }
        while results.len() > ef {
            results.pop();
        }
        while let Some(c) = candidates.pop() {
            let worst = results.peek().map(|r| r.0);
            if let Some(w) = worst {
                if results.len() >= ef && c < w {
                    break;
                }
            }
            for &nb in &self.links[c.slot as usize][layer] {
                if !visited.insert(nb) {
                    continue;
                }
                let cand = Cand {
                    score: store.fast_score(nb, q, q_inv),
                    slot: nb,
                };
                let admit = results.len() < ef || results.peek().is_some_and(|w| cand > w.0);
                if admit {
                    candidates.push(cand);
                    results.push(Reverse(cand));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<Cand> = results.into_iter().map(|r| r.0).collect();
        out.sort_unstable_by(|a, b| b.cmp(a));
        out
    }

    /// Neighbour-selection heuristic: keep a candidate only if it is closer
    /// to the base than to every neighbour already kept, then top up with the
    /// best pruned ones. `cands` must be sorted best first.
    fn select(store: &VectorStore, cands: &[Cand], m: usize) -> Vec<u32> {
        let mut kept: Vec<Cand> = Vec::with_capacity(m);
        let mut pruned: Vec<u32> = Vec::new();
        for &c in cands {
            if kept.len() >= m {
                break;
            }
            let diverse = kept
                .iter()
                .all(|k| store.slot_score(c.slot, k.slot) < c.score);
            if diverse {
                kept.push(c);
            } else {
                pruned.push(c.slot);
            }
        }
        let mut out: Vec<u32> = kept.into_iter().map(|c| c.slot).collect();
        for p in pruned {
            if out.len() >= m {
                break;
            }
            out.push(p);
        }
        out
    }

    fn set_links(
        &mut self,
        slot: u32,
        layer: usize,
        mut new: Vec<u32>,
        journal: &mut impl LinkJournal,
    ) {
        new.sort_unstable();
        let cur = &mut self.links[slot as usize][layer];
        journal.record_links(slot, layer as u8, cur);
        *cur = new;
    }

    /// Links an already-stored slot into the graph.
    pub fn insert(
        &mut self,
        store: &VectorStore,
        slot: u32,
        level: u8,
        max_links: usize,
        ef_construction: usize,
        journal: &mut impl LinkJournal,
    ) {
        debug_assert_eq!(self.levels.len(), slot as usize);
        self.levels.push(level);
        self.links.push(vec![Vec::new(); level as usize + 1]);

        let Some(entry) = self.entry else {
            self.entry = Some(slot);
            self.max_level = level;
            return;
        };

        let q = store.vector(slot);
        let q_inv = store.inv_norm(slot);
        let mut visited = Visited::new(self.levels.len());
        let mut eps = vec![Cand {
            score: store.fast_score(entry, q, q_inv),
            slot: entry,
        }];
        for layer in (level as usize + 1..=self.max_level as usize).rev() {
            visited.clear();
            eps = self.search_layer(store, q, q_inv, &eps, 1, layer, &mut visited);
        }
        for layer in (0..=level.min(self.max_level) as usize).rev() {
            visited.clear();
            let found = self.search_layer(store, q, q_inv, &eps, ef_construction, layer, &mut visited);
            let neighbours = Self::select(store, &found, max_links);
            self.set_links(slot, layer, neighbours.clone(), journal);

            let cap = Self::max_links_at(max_links, layer);
            for nb in neighbours {
                let mut list = self.links[nb as usize][layer].clone();
                list.push(slot);
                if list.len() > cap {
                    let base = store.vector(nb);
                    let base_inv = store.inv_norm(nb);
                    let mut scored: Vec<Cand> = list
                        .iter()
                        .map(|&s| Cand {
                            score: store.fast_score(s, base, base_inv),
                            slot: s,
                        })
                        .collect();
                    scored.sort_unstable_by(|a, b| b.cmp(a));
                    list = Self::select(store, &scored, cap);
                }
                self.set_links(nb, layer, list, journal);
            }
            eps = found;
        }
        if level > self.max_level {
            self.entry = Some(slot);
            self.max_level = level;
        }
    }

    /// Up to `ef` candidates near `q`, best first. Tombstoned slots are
    /// included; the caller filters them.
    pub fn search(&self, store: &VectorStore, q: &[f32], q_inv: f32, ef: usize) -> Vec<Cand> {
        let Some(entry) = self.entry else {
            return Vec::new();
        };
        let mut visited = Visited::new(self.levels.len());
        let mut eps = vec![Cand {
            score: store.fast_score(entry, q, q_inv),
            slot: entry,
        }];
        for layer in (1..=self.max_level as usize).rev() {
            visited.clear();
            eps = self.search_layer(store, q, q_inv, &eps, 1, layer, &mut visited);
        }
        visited.clear();
        self.search_layer(store, q, q_inv, &eps, ef, 0, &mut visited)
    }
}
