//! Evaluation harness: a uniform-chunking baseline, a synthetic corpus with
//! planted facts, and a side-by-side report.
//!
//! Hit@k here means full containment: a case counts as a hit only when some
//! returned chunk's span covers the whole gold span. A case is fragmented when
//! no returned chunk contains the gold span but at least two returned chunks
//! cover parts of it.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::Embedder;
use crate::engine::{Engine, EngineConfig};
use crate::error::{Error, Result};
use crate::ids::{content_hash, SearchId};
use crate::ingest::{detokenize, Document, TokenSpan};
use crate::query::{retrieve_with_vector, QueryRequest};
use crate::storage::corpus_hash;
use crate::vector_index::{Backend, HnswParams, IndexedVector, VectorIndex};

pub const DEFAULT_EVAL_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub chunk_tokens: usize,
    pub overlap_tokens: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            chunk_tokens: 500,
            overlap_tokens: 50,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_tokens == 0 || self.overlap_tokens >= self.chunk_tokens {
            return Err(Error::Config(format!(
                "baseline overlap ({}) must be smaller than chunk size ({})",
                self.overlap_tokens, self.chunk_tokens
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.chunk_tokens - self.overlap_tokens
    }
}

/// Number of fixed windows over `len` tokens.
pub fn baseline_window_count(len: usize, cfg: &BaselineConfig) -> usize {
    if len == 0 {
        0
    } else if len <= cfg.chunk_tokens {
        1
    } else {
        1 + (len - cfg.chunk_tokens).div_ceil(cfg.stride())
    }
}

/// Fixed windows: starts at multiples of the stride until one reaches the
/// end of the document.
pub fn baseline_spans(len: usize, cfg: &BaselineConfig) -> Vec<TokenSpan> {
    let mut out = Vec::with_capacity(baseline_window_count(len, cfg));
    let mut start = 0;
    while start < len {
        let end = (start + cfg.chunk_tokens).min(len);
        out.push(TokenSpan { start, end });
        if end == len {
            break;
        }
        start += cfg.stride();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaselineChunk {
    pub doc_id: String,
    pub span: TokenSpan,
    pub text: String,
}

/// Single-layer index: each fixed window is both searched and returned.
pub struct BaselineIndex {
    pub config: BaselineConfig,
    pub chunks: Vec<BaselineChunk>,
    pub index: VectorIndex,
    pub corpus_hash: u64,
}

impl BaselineIndex {
    /// Top-k windows, best first, as indices into `chunks`.
    pub fn query(&self, q: &crate::embedding::EmbeddingVector, k: usize) -> Result<Vec<(usize, f32)>> {
        Ok(self
            .index
            .query(q, k)?
            .into_iter()
            .map(|h| (h.search_id.0 as usize, h.score))
            .collect())
    }

    pub fn fingerprint(&self) -> &str {
        self.index.fingerprint()
    }
}

fn documents_hash(documents: &[Document]) -> u64 {
    let mut pairs: Vec<(&str, u64)> = documents
        .iter()
        .map(|d| (d.doc_id.as_str(), content_hash(&d.text)))
        .collect();
    pairs.sort_unstable();
    corpus_hash(pairs)
}

pub fn build_baseline(
    documents: &[Document],
    cfg: BaselineConfig,
    embedder: &dyn Embedder,
    backend: Backend,
    params: HnswParams,
) -> Result<BaselineIndex> {
    cfg.validate()?;
    let mut chunks = Vec::new();
    for d in documents {
        let tokens = d.tokens();
        for span in baseline_spans(tokens.len(), &cfg) {
            chunks.push(BaselineChunk {
                doc_id: d.doc_id.clone(),
                span,
                text: detokenize(&d.text, &tokens, span)?.to_owned(),
            });
        }
    }
    let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
    let vectors = embedder.embed_batch(&texts)?;
    let entries = vectors
        .into_iter()
        .enumerate()
        .map(|(i, v)| IndexedVector::live(SearchId(i as u64), v));
    let index = VectorIndex::build(embedder.dim(), backend, params, entries)?
        .with_fingerprint(embedder.fingerprint());
    Ok(BaselineIndex {
        config: cfg,
        chunks,
        index,
        corpus_hash: documents_hash(documents),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeedleCase {
    pub case_id: usize,
    pub query: String,
    pub gold_text: String,
    pub doc_id: String,
    pub gold_span: TokenSpan,
    pub straddles_boundary: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeedleSpec {
    pub cases: usize,
    /// Documents without any planted fact.
    pub distractors: usize,
    /// Every `n`-th case (1-based) sits away from window boundaries; the
    /// rest straddle the 500-token mark.
    pub inside_every: usize,
}

impl Default for NeedleSpec {
    fn default() -> Self {
        Self {
            cases: 80,
            distractors: 20,
            inside_every: 4,
        }
    }
}

impl NeedleSpec {
    pub fn is_straddling(&self, case_id: usize) -> bool {
        self.inside_every == 0 || !(case_id + 1).is_multiple_of(self.inside_every)
    }
}

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ne", "ru", "sa", "ti", "vo", "be", "da", "fi", "go", "hu", "ja", "pe", "ro",
    "su", "te", "wa", "ze", "mo", "ni", "la", "ke",
];

fn filler_vocabulary(rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut words: Vec<String> = (0..600)
        .map(|_| {
            let n = rng.random_range(2..=3);
            (0..n).map(|_| *SYLLABLES.choose(rng).unwrap()).collect()
        })
        .collect();
    words.sort();
    words.dedup();
    words
}

struct DocBuilder {
    paragraphs: Vec<Vec<String>>,
    len: usize,
}

impl DocBuilder {
    fn new() -> Self {
        Self {
            paragraphs: Vec::new(),
            len: 0,
        }
    }

    fn filler(rng: &mut ChaCha8Rng, vocab: &[String], n: usize) -> Vec<String> {
        (0..n).map(|_| vocab.choose(rng).unwrap().clone()).collect()
    }

    fn push(&mut self, words: Vec<String>) {
        self.len += words.len();
        self.paragraphs.push(words);
    }

    /// Filler paragraphs totalling exactly `total` tokens, each 64..=300.
    fn fill_exact(&mut self, rng: &mut ChaCha8Rng, vocab: &[String], mut total: usize) {
        while total > 0 {
            let n = if total <= 300 {
                total
            } else {
                let hi = 300.min(total - 64);
                rng.random_range(64..=hi)
            };
            self.push(Self::filler(rng, vocab, n));
            total -= n;
        }
    }

    fn text(&self) -> String {
        self.paragraphs
            .iter()
            .map(|p| p.join(" "))
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

/// Deterministic corpus with one planted fact per case document.
pub fn generate_needle_corpus(spec: &NeedleSpec, seed: u64) -> Result<(Vec<Document>, Vec<NeedleCase>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = filler_vocabulary(&mut rng);
    let mut docs = Vec::with_capacity(spec.cases + spec.distractors);
    let mut cases = Vec::with_capacity(spec.cases);

    for case_id in 0..spec.cases {
        let straddles = spec.is_straddling(case_id);
        let gold_vocab: Vec<String> = (0..12)
            .map(|j| {
                let stem: String = (0..2).map(|_| *SYLLABLES.choose(&mut rng).unwrap()).collect();
                format!("{stem}x{case_id}q{j}")
            })
            .collect();
        let gold_len = rng.random_range(70..=100);
        let pre = rng.random_range(0..=40);
        let post = rng.random_range(0..=40);
        let gold_start = if straddles {
            rng.random_range((501 - gold_len).max(400)..=449)
        } else {
            rng.random_range(120..=250)
        };

        let mut b = DocBuilder::new();
        let para_start = gold_start - pre;
        b.fill_exact(&mut rng, &vocab, para_start);
        let mut para = DocBuilder::filler(&mut rng, &vocab, pre);
        let gold: Vec<String> = (0..gold_len).map(|i| gold_vocab[i % gold_vocab.len()].clone()).collect();
        para.extend(gold.iter().cloned());
        para.extend(DocBuilder::filler(&mut rng, &vocab, post));
        b.push(para);
        let tail = rng.random_range(500..=900);
        b.fill_exact(&mut rng, &vocab, tail);

        let doc_id = format!("needle-{case_id:04}.txt");
        let doc = Document::new(doc_id.clone(), doc_id.clone(), &b.text())?;
        let span = TokenSpan::new(gold_start, gold_start + gold_len)?;
        let gold_text = detokenize(&doc.text, &doc.tokens(), span)?.to_owned();
        debug_assert_eq!(gold_text, gold.join(" "));
        cases.push(NeedleCase {
            case_id,
            query: gold_vocab.join(" "),
            gold_text,
            doc_id,
            gold_span: span,
            straddles_boundary: straddles,
        });
        docs.push(doc);
    }
    for i in 0..spec.distractors {
        let mut b = DocBuilder::new();
        let len = rng.random_range(800..=1500);
        b.fill_exact(&mut rng, &vocab, len);
        let doc_id = format!("distractor-{i:04}.txt");
        docs.push(Document::new(doc_id.clone(), doc_id, &b.text())?);
    }
    Ok((docs, cases))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: usize,
    pub straddles_boundary: bool,
    pub sinr_hit: bool,
    pub baseline_hit: bool,
    pub sinr_fragmented: bool,
    pub baseline_fragmented: bool,
    pub sinr_search_hits: usize,
    pub sinr_unique_parents: usize,
    pub sinr_context_tokens: usize,
    pub baseline_context_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub cases: usize,
    pub sinr_hit_rate: f64,
    pub baseline_hit_rate: f64,
    pub sinr_fragmentation_rate: f64,
    pub baseline_fragmentation_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub metric: String,
    pub k: usize,
    pub all: RateSummary,
    pub straddling: RateSummary,
    pub inside: RateSummary,
    pub mean_search_hits: f64,
    pub mean_unique_parents: f64,
    pub mean_sinr_context_tokens: f64,
    pub mean_baseline_context_tokens: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalLatency {
    pub sinr_build_ms: f64,
    pub baseline_build_ms: f64,
    pub embed_mean_us: f64,
    pub sinr_search_mean_us: f64,
    pub sinr_map_mean_us: f64,
    pub sinr_fetch_mean_us: f64,
    pub baseline_search_mean_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: Option<u64>,
    pub summary: EvalSummary,
    pub cases: Vec<CaseResult>,
    pub latency: EvalLatency,
}

#[derive(Serialize)]
struct Tagged<'a, T> {
    kind: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

impl EvalReport {
    /// Equality ignoring wall-clock measurements.
    pub fn same_results(&self, other: &EvalReport) -> bool {
        self.seed == other.seed && self.summary == other.summary && self.cases == other.cases
    }

    /// One JSON object per line: cases, then the summary, then latencies.
    pub fn to_line_records(&self) -> String {
        let mut out = String::new();
        let line = |out: &mut String, v: String| {
            out.push_str(&v);
            out.push('\n');
        };
        for c in &self.cases {
            line(&mut out, serde_json::to_string(&Tagged { kind: "case", body: c }).unwrap());
        }
        line(&mut out, serde_json::to_string(&Tagged { kind: "summary", body: &self.summary }).unwrap());
        line(&mut out, serde_json::to_string(&Tagged { kind: "latency", body: &self.latency }).unwrap());
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let yn = |b: bool| if b { "yes" } else { "no" };
        let _ = writeln!(
            s,
            "{:>5} {:>9} {:>8} {:>8} {:>9} {:>9} {:>7} {:>9} {:>9}",
            "case", "straddles", "sinr_hit", "base_hit", "sinr_frag", "base_frag", "parents", "sinr_tok", "base_tok"
        );
        for c in &self.cases {
            let _ = writeln!(
                s,
                "{:>5} {:>9} {:>8} {:>8} {:>9} {:>9} {:>7} {:>9} {:>9}",
                c.case_id,
                yn(c.straddles_boundary),
                yn(c.sinr_hit),
                yn(c.baseline_hit),
                yn(c.sinr_fragmented),
                yn(c.baseline_fragmented),
                c.sinr_unique_parents,
                c.sinr_context_tokens,
                c.baseline_context_tokens
            );
        }
        let sm = &self.summary;
        let _ = writeln!(s, "metric: {} (k={})", sm.metric, sm.k);
        for (name, r) in [("all", &sm.all), ("straddling", &sm.straddling), ("inside", &sm.inside)] {
            let _ = writeln!(
                s,
                "{name:<10} cases {:>4}  hit@{}: sinr {:.3} baseline {:.3}  fragmentation: sinr {:.3} baseline {:.3}",
                r.cases, sm.k, r.sinr_hit_rate, r.baseline_hit_rate, r.sinr_fragmentation_rate, r.baseline_fragmentation_rate
            );
        }
        let _ = writeln!(
            s,
            "consolidation: {:.2} search hits -> {:.2} unique parents",
            sm.mean_search_hits, sm.mean_unique_parents
        );
        let _ = writeln!(
            s,
            "mean context tokens: sinr {:.1} baseline {:.1}",
            sm.mean_sinr_context_tokens, sm.mean_baseline_context_tokens
        );
        let l = &self.latency;
        let _ = writeln!(
            s,
            "latency build_ms: sinr {:.1} baseline {:.1}",
            l.sinr_build_ms, l.baseline_build_ms
        );
        let _ = writeln!(
            s,
            "latency query_us: embed {:.1} sinr_search {:.1} sinr_map {:.2} sinr_fetch {:.1} baseline_search {:.1}",
            l.embed_mean_us, l.sinr_search_mean_us, l.sinr_map_mean_us, l.sinr_fetch_mean_us, l.baseline_search_mean_us
        );
        s
    }
}

fn contains_gold(span: TokenSpan, gold: TokenSpan) -> bool {
    span.contains(gold)
}

/// Full containment by any chunk, and fragmentation across chunks.
fn judge(returned: &[(&str, TokenSpan)], case: &NeedleCase) -> (bool, bool) {
    let same_doc = returned.iter().filter(|(d, _)| *d == case.doc_id);
    let hit = same_doc.clone().any(|(_, s)| contains_gold(*s, case.gold_span));
    let partial = same_doc.filter(|(_, s)| s.overlaps(case.gold_span)).count();
    (hit, !hit && partial >= 2)
}

fn rates(rows: &[&CaseResult]) -> RateSummary {
    let n = rows.len();
    let rate = |f: &dyn Fn(&CaseResult) -> bool| {
        if n == 0 {
            0.0
        } else {
            rows.iter().filter(|c| f(c)).count() as f64 / n as f64
        }
    };
    RateSummary {
        cases: n,
        sinr_hit_rate: rate(&|c| c.sinr_hit),
        baseline_hit_rate: rate(&|c| c.baseline_hit),
        sinr_fragmentation_rate: rate(&|c| c.sinr_fragmented),
        baseline_fragmentation_rate: rate(&|c| c.baseline_fragmented),
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

struct CaseTiming {
    embed_ns: u64,
    search_ns: u64,
    map_ns: u64,
    fetch_ns: u64,
    baseline_ns: u64,
}

/// Runs every case against both systems.
pub fn run_eval(engine: &Engine, baseline: &BaselineIndex, cases: &[NeedleCase], k: usize) -> Result<EvalReport> {
    if engine.corpus_hash() != baseline.corpus_hash {
        return Err(Error::Contract("engine and baseline were built over different corpora".into()));
    }
    if engine.fingerprint() != baseline.fingerprint() {
        return Err(Error::Contract("engine and baseline use different embedders".into()));
    }
    let req_k = QueryRequest::new("").with_k(k);
    req_k.validate()?;

    let results: Vec<(CaseResult, CaseTiming)> = cases
        .par_iter()
        .map(|case| -> Result<_> {
            let t = Instant::now();
            let q = engine.embedder().embed(&case.query)?;
            let embed_ns = t.elapsed().as_nanos() as u64;

            let req = QueryRequest::new(case.query.clone()).with_k(k);
            let sinr = retrieve_with_vector(engine, &req, &q)?;
            let sinr_spans: Vec<(&str, TokenSpan)> =
                sinr.parents.iter().map(|p| (p.doc_id.as_str(), p.span)).collect();
            let (sinr_hit, sinr_fragmented) = judge(&sinr_spans, case);

            let t = Instant::now();
            let base = baseline.query(&q, k)?;
            let baseline_ns = t.elapsed().as_nanos() as u64;
            let base_spans: Vec<(&str, TokenSpan)> = base
                .iter()
                .map(|&(i, _)| (baseline.chunks[i].doc_id.as_str(), baseline.chunks[i].span))
                .collect();
            let (baseline_hit, baseline_fragmented) = judge(&base_spans, case);

            Ok((
                CaseResult {
                    case_id: case.case_id,
                    straddles_boundary: case.straddles_boundary,
                    sinr_hit,
                    baseline_hit,
                    sinr_fragmented,
                    baseline_fragmented,
                    sinr_search_hits: sinr.trace.hits.len(),
                    sinr_unique_parents: sinr.trace.parents.len(),
                    sinr_context_tokens: sinr.total_context_tokens,
                    baseline_context_tokens: base_spans.iter().map(|(_, s)| s.len()).sum(),
                },
                CaseTiming {
                    embed_ns,
                    search_ns: sinr.trace.timings.search_ns,
                    map_ns: sinr.trace.timings.map_ns,
                    fetch_ns: sinr.trace.timings.fetch_ns,
                    baseline_ns,
                },
            ))
        })
        .collect::<Result<_>>()?;

    let rows: Vec<CaseResult> = results.iter().map(|(c, _)| c.clone()).collect();
    let all: Vec<&CaseResult> = rows.iter().collect();
    let straddling: Vec<&CaseResult> = rows.iter().filter(|c| c.straddles_boundary).collect();
    let inside: Vec<&CaseResult> = rows.iter().filter(|c| !c.straddles_boundary).collect();
    let summary = EvalSummary {
        metric: "full-containment hit@k (contextual recall stand-in)".into(),
        k,
        all: rates(&all),
        straddling: rates(&straddling),
        inside: rates(&inside),
        mean_search_hits: mean(rows.iter().map(|c| c.sinr_search_hits as f64)),
        mean_unique_parents: mean(rows.iter().map(|c| c.sinr_unique_parents as f64)),
        mean_sinr_context_tokens: mean(rows.iter().map(|c| c.sinr_context_tokens as f64)),
        mean_baseline_context_tokens: mean(rows.iter().map(|c| c.baseline_context_tokens as f64)),
    };
    let us = |f: fn(&CaseTiming) -> u64| mean(results.iter().map(|(_, t)| f(t) as f64 / 1000.0));
    let latency = EvalLatency {
        embed_mean_us: us(|t| t.embed_ns),
        sinr_search_mean_us: us(|t| t.search_ns),
        sinr_map_mean_us: us(|t| t.map_ns),
        sinr_fetch_mean_us: us(|t| t.fetch_ns),
        baseline_search_mean_us: us(|t| t.baseline_ns),
        ..EvalLatency::default()
    };
    Ok(EvalReport {
        seed: None,
        summary,
        cases: rows,
        latency,
    })
}

/// Generates a corpus, builds both systems with `config` and evaluates.
pub fn run_needle_eval(
    config: &EngineConfig,
    baseline: BaselineConfig,
    spec: &NeedleSpec,
    seed: u64,
    k: usize,
) -> Result<EvalReport> {
    let (docs, cases) = generate_needle_corpus(spec, seed)?;
    let t = Instant::now();
    let engine = Engine::build(config.clone(), &docs)?;
    let sinr_build_ms = t.elapsed().as_secs_f64() * 1e3;
    let t = Instant::now();
    let base = build_baseline(&docs, baseline, engine.embedder(), config.backend, config.index)?;
    let baseline_build_ms = t.elapsed().as_secs_f64() * 1e3;
    let mut report = run_eval(&engine, &base, &cases, k)?;
    report.seed = Some(seed);
    report.latency.sinr_build_ms = sinr_build_ms;
    report.latency.baseline_build_ms = baseline_build_ms;
    Ok(report)
}
