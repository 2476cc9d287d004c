//! Text encoders.
//!
//! Two providers sit behind [`Embedder`]:
//!
//! * `local-hash`: signed feature hashing. Each lowercased token is hashed
//!   with xxh64 under a fixed seed; the hash picks a bucket (`h % dim`) and a
//!   sign (top bit). Signed term counts are accumulated in `f64` in token
//!   order and L2-normalized, so outputs are bit-identical across platforms.
//! * `remote`: an HTTP service answering `POST /embed` with
//!   `{"texts": [...], "dim": n}` -> `{"vectors": [[...]], "fingerprint": "..."}`.

use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh64::xxh64;

use crate::error::{Error, Result};
use crate::ingest::tokenize;

pub const LOCAL_HASH_SEED: u64 = 0x9e37_79b9_7f4a_7c15;
pub const DEFAULT_LOCAL_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Contract("embedding dimension must be positive".into()));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }
}

impl std::ops::Neg for EmbeddingVector {
    type Output = EmbeddingVector;

    fn neg(self) -> Self::Output {
        EmbeddingVector {
            values: self.values.into_iter().map(|v| -v).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provider {
    LocalHash,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderSpec {
    pub provider: Provider,
    pub dim: usize,
    /// Identifies the model and version. Empty for a remote provider means
    /// "accept whatever the service reports".
    pub provider_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        Self::local_hash(DEFAULT_LOCAL_DIM)
    }
}

impl EmbedderSpec {
    pub fn local_hash(dim: usize) -> Self {
        Self {
            provider: Provider::LocalHash,
            dim,
            provider_fingerprint: local_hash_fingerprint(dim),
            endpoint: None,
        }
    }

    pub fn remote(endpoint: impl Into<String>, dim: usize, fingerprint: impl Into<String>) -> Self {
        Self {
            provider: Provider::Remote,
            dim,
            provider_fingerprint: fingerprint.into(),
            endpoint: Some(endpoint.into()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        match self.provider {
            Provider::LocalHash if self.provider_fingerprint != local_hash_fingerprint(self.dim) => {
                Err(Error::Config(format!(
                    "local-hash fingerprint `{}` does not match dim {}",
                    self.provider_fingerprint, self.dim
                )))
            }
            Provider::Remote if self.endpoint.is_none() => {
                Err(Error::Config("remote embedder requires an endpoint".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Embedder>> {
        self.validate()?;
        Ok(match self.provider {
            Provider::LocalHash => Box::new(HashEmbedder::new(self.dim)),
            Provider::Remote => Box::new(RemoteEmbedder::new(self.clone())),
        })
    }
}

pub fn local_hash_fingerprint(dim: usize) -> String {
    format!("local-hash/xxh64/seed={LOCAL_HASH_SEED:016x}/dim={dim}/v1")
}

pub trait Embedder: Send + Sync {
    fn spec(&self) -> &EmbedderSpec;

    /// Fingerprint of the vectors this embedder produces.
    fn fingerprint(&self) -> &str {
        &self.spec().provider_fingerprint
    }

    fn dim(&self) -> usize {
        self.spec().dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let mut out = self.embed_batch(&[text])?;
        out.pop()
            .ok_or_else(|| Error::Contract("embedder returned no vector".into()))
    }
}

pub fn embed_text(text: &str, spec: &EmbedderSpec) -> Result<EmbeddingVector> {
    spec.build()?.embed(text)
}

pub fn embed_batch(texts: &[&str], spec: &EmbedderSpec) -> Result<Vec<EmbeddingVector>> {
    spec.build()?.embed_batch(texts)
}

/// Cosine similarity. A zero vector has similarity 0 with everything.
pub fn similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f32> {
    if a.dim() != b.dim() {
        return Err(Error::Contract(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(cosine(a.values(), b.values()))
}

pub(crate) fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    ((dot / (na.sqrt() * nb.sqrt())) as f32).clamp(-1.0, 1.0)
}

fn l2_normalize(acc: &[f64]) -> Vec<f32> {
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; acc.len()];
    }
    acc.iter().map(|v| (v / norm) as f32).collect()
}

/// Signed feature-hashing embedder.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    spec: EmbedderSpec,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            spec: EmbedderSpec::local_hash(dim),
        }
    }

    /// Lowercased token with surrounding punctuation stripped; tokens made
    /// only of punctuation are kept whole.
    fn feature(token: &str) -> String {
        let lower = token.to_lowercase();
        let trimmed = lower.trim_matches(|c: char| !c.is_alphanumeric());
        if trimmed.is_empty() {
            lower
        } else {
            trimmed.to_owned()
        }
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let dim = self.spec.dim;
        let mut signed = vec![0f64; dim];
        let mut unsigned = vec![0f64; dim];
        let mut any = false;
        for tok in tokenize(text) {
            let h = xxh64(Self::feature(tok.as_str(text)).as_bytes(), LOCAL_HASH_SEED);
            let bucket = (h % dim as u64) as usize;
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            signed[bucket] += sign;
            unsigned[bucket] += 1.0;
            any = true;
        }
        if !any {
            return EmbeddingVector::zeros(dim);
        }
        // Opposite-signed collisions can cancel every bucket; fall back to
        // unsigned counts so non-empty text always gets a unit vector.
        let acc = if signed.iter().all(|&v| v == 0.0) {
            &unsigned
        } else {
            &signed
        };
        EmbeddingVector {
            values: l2_normalize(acc),
        }
    }
}

impl Embedder for HashEmbedder {
    fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        Ok(texts.par_iter().map(|t| self.embed_one(t)).collect())
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(self.embed_one(text))
    }
}

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
    dim: usize,
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
    fingerprint: String,
}

/// Vectors and service fingerprint from one request.
type Reply = (Vec<Vec<f32>>, String);

/// Client for the `POST /embed` wire contract.
pub struct RemoteEmbedder {
    spec: EmbedderSpec,
    agent: ureq::Agent,
    url: String,
    pub max_batch: usize,
    pub parallelism: usize,
    pub max_attempts: u32,
    pub backoff: Duration,
}

impl RemoteEmbedder {
    pub fn new(spec: EmbedderSpec) -> Self {
        let base = spec.endpoint.clone().unwrap_or_default();
        let url = format!("{}/embed", base.trim_end_matches('/'));
        Self {
            spec,
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(30))
                .build(),
            url,
            max_batch: 64,
            parallelism: 4,
            max_attempts: 3,
            backoff: Duration::from_millis(100),
        }
    }

    fn post_once(&self, body: &str) -> std::result::Result<String, (String, bool)> {
        match self
            .agent
            .post(&self.url)
            .set("Content-Type", "application/json")
            .send_string(body)
        {
            Ok(resp) if resp.status() == 200 => resp
                .into_string()
                .map_err(|e| (format!("reading response body: {e}"), true)),
            Ok(resp) => Err((format!("HTTP {}", resp.status()), false)),
            Err(ureq::Error::Status(code, _)) => {
                Err((format!("HTTP {code}"), code == 429 || code >= 500))
            }
            Err(ureq::Error::Transport(t)) => Err((t.to_string(), true)),
        }
    }

    fn request(&self, texts: &[&str]) -> Result<(Vec<Vec<f32>>, String)> {
        let body = serde_json::to_string(&EmbedRequest {
            texts,
            dim: self.spec.dim,
        })
        .map_err(|e| Error::Contract(format!("encoding request: {e}")))?;

        let mut attempts = 0;
        let raw = loop {
            attempts += 1;
            match self.post_once(&body) {
                Ok(raw) => break raw,
                Err((message, retryable)) => {
                    if !retryable || attempts >= self.max_attempts {
                        return Err(Error::Transport {
                            message,
                            attempts,
                            retryable,
                        });
                    }
                    std::thread::sleep(self.backoff * attempts);
                }
            }
        };
        let resp: EmbedResponse = serde_json::from_str(&raw)
            .map_err(|e| Error::Contract(format!("malformed /embed response: {e}")))?;
        if resp.vectors.len() != texts.len() {
            return Err(Error::Contract(format!(
                "/embed returned {} vectors for {} texts",
                resp.vectors.len(),
                texts.len()
            )));
        }
        if let Some(v) = resp.vectors.iter().find(|v| v.len() != self.spec.dim) {
            return Err(Error::Contract(format!(
                "/embed returned dimension {}, expected {}",
                v.len(),
                self.spec.dim
            )));
        }
        Ok((resp.vectors, resp.fingerprint))
    }
}

impl Embedder for RemoteEmbedder {
    fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let batches: Vec<&[&str]> = texts.chunks(self.max_batch.max(1)).collect();
        let mut results: Vec<Option<Result<Reply>>> =
            (0..batches.len()).map(|_| None).collect();
        for (group, slots) in batches
            .chunks(self.parallelism.max(1))
            .zip(results.chunks_mut(self.parallelism.max(1)))
        {
            std::thread::scope(|s| {
                let handles: Vec<_> = group.iter().map(|b| s.spawn(|| self.request(b))).collect();
                for (slot, h) in slots.iter_mut().zip(handles) {
                    *slot = Some(h.join().unwrap_or_else(|_| {
                        Err(Error::Contract("embedding worker panicked".into()))
                    }));
                }
            });
        }

        let mut out = Vec::with_capacity(texts.len());
        for r in results {
            let (vectors, fingerprint) = r.expect("every batch slot filled")?;
            let expected = &self.spec.provider_fingerprint;
            if !expected.is_empty() && &fingerprint != expected {
                return Err(Error::FingerprintMismatch {
                    expected: expected.clone(),
                    found: fingerprint,
                });
            }
            for v in vectors {
                let acc: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
                out.push(EmbeddingVector {
                    values: l2_normalize(&acc),
                });
            }
        }
        Ok(out)
    }
}

/// Asks a remote service for its fingerprint by embedding one probe text.
pub fn probe_remote_fingerprint(spec: &EmbedderSpec) -> Result<String> {
    let e = RemoteEmbedder::new(spec.clone());
    let (_, fp) = e.request(&["fingerprint probe"])?;
    Ok(fp)
}
