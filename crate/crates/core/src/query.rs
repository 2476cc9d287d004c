//! Query path: embed, top-k search, parent lookup, deduplication, budgeted
//! fetch. Every stage is recorded in a [`QueryTrace`].

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::ids::{RetrieveId, SearchId};
use crate::storage::StoredRetrieveChunk;

pub const TRACE_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_K: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub text: String,
    pub k: usize,
    pub max_context_tokens: Option<usize>,
    pub max_parents: Option<usize>,
}

impl QueryRequest {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            k: DEFAULT_K,
            max_context_tokens: None,
            max_parents: None,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_budget(mut self, max_context_tokens: usize) -> Self {
        self.max_context_tokens = Some(max_context_tokens);
        self
    }

    pub fn with_max_parents(mut self, max_parents: usize) -> Self {
        self.max_parents = Some(max_parents);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Contract("k must be at least 1".into()));
        }
        if self.max_context_tokens == Some(0) || self.max_parents == Some(0) {
            return Err(Error::Contract("budgets must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceHit {
    pub search_id: SearchId,
    pub score: f32,
    pub retrieve_id: RetrieveId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceParent {
    pub retrieve_id: RetrieveId,
    pub best_score: f32,
    /// Number of hits that mapped to this parent.
    pub hits: usize,
    pub tokens: usize,
    pub admitted: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimings {
    pub embed_ns: u64,
    pub search_ns: u64,
    pub map_ns: u64,
    pub fetch_ns: u64,
}

impl StageTimings {
    pub fn total_ns(&self) -> u64 {
        self.embed_ns + self.search_ns + self.map_ns + self.fetch_ns
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTrace {
    pub format_version: u32,
    pub query: String,
    pub fingerprint: String,
    pub k: usize,
    pub hits: Vec<TraceHit>,
    /// Aggregated parents before any cap or budget, best first.
    pub parents: Vec<TraceParent>,
    /// Forward-map lookups performed by the map stage.
    pub lookups: usize,
    pub over_budget: bool,
    pub timings: StageTimings,
}

impl QueryTrace {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::corrupt("trace", e.to_string()))
    }

    /// The same trace with zeroed timings, for comparisons.
    pub fn without_timings(&self) -> Self {
        Self {
            timings: StageTimings::default(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub parents: Vec<StoredRetrieveChunk>,
    pub trace: QueryTrace,
    pub total_context_tokens: usize,
    /// A single parent larger than the budget was returned on its own.
    pub over_budget: bool,
}

fn ns_since(t: Instant) -> u64 {
    t.elapsed().as_nanos() as u64
}

fn check_fingerprint(engine: &Engine) -> Result<()> {
    let found = engine.embedder().fingerprint();
    if found != engine.fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: engine.fingerprint().to_owned(),
            found: found.to_owned(),
        });
    }
    Ok(())
}

pub fn retrieve(engine: &Engine, req: &QueryRequest) -> Result<RetrievalResult> {
    req.validate()?;
    check_fingerprint(engine)?;
    let t = Instant::now();
    let q = engine.embedder().embed(&req.text)?;
    let embed_ns = ns_since(t);
    let mut r = retrieve_with_vector(engine, req, &q)?;
    r.trace.timings.embed_ns = embed_ns;
    Ok(r)
}

/// Runs the search, map and fetch stages for an already embedded query.
pub fn retrieve_with_vector(
    engine: &Engine,
    req: &QueryRequest,
    q: &EmbeddingVector,
) -> Result<RetrievalResult> {
    req.validate()?;
    check_fingerprint(engine)?;
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let scored = engine.index().query(q, req.k)?;
    timings.search_ns = ns_since(t);

    let t = Instant::now();
    let mapping = engine.mapping();
    let mut hits = Vec::with_capacity(scored.len());
    for h in &scored {
        hits.push(TraceHit {
            search_id: h.search_id,
            score: h.score,
            retrieve_id: mapping.lookup_parent(h.search_id)?,
        });
    }
    let lookups = hits.len();
    let mut parents: Vec<TraceParent> = Vec::with_capacity(hits.len());
    for h in &hits {
        match parents.iter_mut().find(|p| p.retrieve_id == h.retrieve_id) {
            Some(p) => {
                p.hits += 1;
                if h.score > p.best_score {
                    p.best_score = h.score;
                }
            }
            None => parents.push(TraceParent {
                retrieve_id: h.retrieve_id,
                best_score: h.score,
                hits: 1,
                tokens: 0,
                admitted: false,
            }),
        }
    }
    parents.sort_by(|a, b| {
        b.best_score
            .total_cmp(&a.best_score)
            .then_with(|| a.retrieve_id.cmp(&b.retrieve_id))
    });
    timings.map_ns = ns_since(t);

    let t = Instant::now();
    let docs = engine.docs();
    for p in &mut parents {
        p.tokens = docs.span(p.retrieve_id).map_or(0, |s| s.len());
    }
    let cap = req.max_parents.unwrap_or(usize::MAX);
    let mut total = 0usize;
    let mut over_budget = false;
    let mut admitted = Vec::new();
    for p in parents.iter_mut().take(cap) {
        match req.max_context_tokens {
            Some(budget) if total + p.tokens > budget => {
                if admitted.is_empty() {
                    over_budget = true;
                    p.admitted = true;
                    total += p.tokens;
                    admitted.push(p.retrieve_id);
                }
                break;
            }
            _ => {
                p.admitted = true;
                total += p.tokens;
                admitted.push(p.retrieve_id);
            }
        }
    }
    let (chunks, missing) = docs.get_retrieve_chunks(&admitted, mapping)?;
    if let Some(m) = missing.first() {
        return Err(Error::NotFound(format!("parent {m} is mapped but missing from the document store")));
    }
    timings.fetch_ns = ns_since(t);

    Ok(RetrievalResult {
        parents: chunks,
        total_context_tokens: total,
        over_budget,
        trace: QueryTrace {
            format_version: TRACE_FORMAT_VERSION,
            query: req.text.clone(),
            fingerprint: engine.fingerprint().to_owned(),
            k: req.k,
            hits,
            parents,
            lookups,
            over_budget,
            timings,
        },
    })
}

/// Plain-text report of a trace. Field order is fixed.
pub fn explain(trace: &QueryTrace) -> String {
    let mut s = String::new();
    let admitted = trace.parents.iter().filter(|p| p.admitted).count();
    let _ = writeln!(s, "query: {}", trace.query);
    let _ = writeln!(s, "fingerprint: {}", trace.fingerprint);
    let _ = writeln!(s, "k: {}", trace.k);
    let _ = writeln!(
        s,
        "consolidation: {} hits -> {} parents ({} admitted){}",
        trace.hits.len(),
        trace.parents.len(),
        admitted,
        if trace.over_budget { " over budget" } else { "" }
    );
    let _ = writeln!(s, "hits:");
    for (i, h) in trace.hits.iter().enumerate() {
        let _ = writeln!(s, "  {:>3}. {} {:.6} -> {}", i + 1, h.search_id, h.score, h.retrieve_id);
    }
    let _ = writeln!(s, "parents:");
    for (i, p) in trace.parents.iter().enumerate() {
        let _ = writeln!(
            s,
            "  {:>3}. {} best {:.6} hits {} tokens {}{}",
            i + 1,
            p.retrieve_id,
            p.best_score,
            p.hits,
            p.tokens,
            if p.admitted { " admitted" } else { "" }
        );
    }
    let t = &trace.timings;
    let us = |ns: u64| ns as f64 / 1000.0;
    let _ = writeln!(
        s,
        "timings_us: embed {:.1} search {:.1} map {:.1} fetch {:.1}",
        us(t.embed_ns),
        us(t.search_ns),
        us(t.map_ns),
        us(t.fetch_ns)
    );
    s
}
