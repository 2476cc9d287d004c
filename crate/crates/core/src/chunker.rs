//! Two-layer chunking.
//!
//! A document is first partitioned into variable-size retrieve chunks cut at
//! structural boundaries. Each retrieve chunk is then covered by fixed-size
//! overlapping search windows that never cross the parent's edges, so every
//! search chunk has exactly one parent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{chunk_digest, Layer, RetrieveId, SearchId};
use crate::ingest::{detokenize, tokenize, Document, Token, TokenSpan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkingConfig {
    /// Search window size in tokens.
    pub window_tokens: usize,
    /// Distance between consecutive window starts.
    pub stride_tokens: usize,
    pub min_retrieve_tokens: usize,
    pub max_retrieve_tokens: usize,
    /// A final window shorter than this is dropped when the previous window
    /// already covers it.
    pub min_tail_tokens: usize,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            window_tokens: 150,
            stride_tokens: 100,
            min_retrieve_tokens: 64,
            max_retrieve_tokens: 1000,
            min_tail_tokens: 32,
        }
    }
}

impl ChunkingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride_tokens == 0 || self.stride_tokens > self.window_tokens {
            return Err(Error::Config(format!(
                "stride_tokens must satisfy 0 < stride ({}) <= window ({})",
                self.stride_tokens, self.window_tokens
            )));
        }
        if self.min_tail_tokens >= self.window_tokens {
            return Err(Error::Config(format!(
                "min_tail_tokens ({}) must be smaller than window_tokens ({})",
                self.min_tail_tokens, self.window_tokens
            )));
        }
        if self.min_retrieve_tokens >= self.max_retrieve_tokens {
            return Err(Error::Config(format!(
                "min_retrieve_tokens ({}) must be smaller than max_retrieve_tokens ({})",
                self.min_retrieve_tokens, self.max_retrieve_tokens
            )));
        }
        Ok(())
    }

    pub fn overlap_tokens(&self) -> usize {
        self.window_tokens - self.stride_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrieveChunk {
    pub retrieve_id: RetrieveId,
    pub doc_id: String,
    pub span: TokenSpan,
    pub text: String,
    pub ordinal: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchChunk {
    pub search_id: SearchId,
    pub retrieve_id: RetrieveId,
    pub doc_id: String,
    pub span: TokenSpan,
    pub text: String,
    pub window_ordinal: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChunkedDocument {
    pub retrieve: Vec<RetrieveChunk>,
    pub search: Vec<SearchChunk>,
    /// Forward-mapping fragment: one `(child, parent)` pair per search chunk.
    pub mapping: Vec<(SearchId, RetrieveId)>,
}

/// Retrieve-chunk spans for a document of `token_count` tokens.
///
/// Structural segments are merged greedily until the next one would push the
/// chunk past `max_retrieve_tokens`; oversized segments are hard-split. A
/// second pass repairs chunks shorter than `min_retrieve_tokens` by merging
/// them into a neighbour or, when that would overflow, borrowing tokens from
/// one.
pub fn retrieve_spans(
    token_count: usize,
    boundaries: impl IntoIterator<Item = usize>,
    cfg: &ChunkingConfig,
) -> Vec<TokenSpan> {
    if token_count == 0 {
        return Vec::new();
    }
    let max = cfg.max_retrieve_tokens;
    let min = cfg.min_retrieve_tokens;

    let mut cuts: Vec<usize> = boundaries
        .into_iter()
        .filter(|&b| b > 0 && b < token_count)
        .collect();
    cuts.sort_unstable();
    cuts.dedup();
    cuts.push(token_count);

    let mut chunks: Vec<TokenSpan> = Vec::new();
    let mut cur_start = 0usize;
    let mut seg_start = 0usize;
    for seg_end in cuts {
        let cur_len = seg_start - cur_start;
        if cur_len > 0 && cur_len + (seg_end - seg_start) > max {
            chunks.push(TokenSpan {
                start: cur_start,
                end: seg_start,
            });
            cur_start = seg_start;
        }
        while seg_end - cur_start > max {
            chunks.push(TokenSpan {
                start: cur_start,
                end: cur_start + max,
            });
            cur_start += max;
        }
        seg_start = seg_end;
    }
    if seg_start > cur_start {
        chunks.push(TokenSpan {
            start: cur_start,
            end: seg_start,
        });
    }

    let mut i = 0;
    while chunks.len() > 1 && i < chunks.len() {
        let len = chunks[i].len();
        if len >= min {
            i += 1;
            continue;
        }
        let prev = i.checked_sub(1);
        let next = (i + 1 < chunks.len()).then_some(i + 1);
        if let Some(p) = prev.filter(|&p| chunks[p].len() + len <= max) {
            chunks[p].end = chunks[i].end;
            chunks.remove(i);
            continue;
        }
        if let Some(n) = next.filter(|&n| chunks[n].len() + len <= max) {
            chunks[i].end = chunks[n].end;
            chunks.remove(n);
            continue;
        }
        let need = min - len;
        if let Some(p) = prev.filter(|&p| chunks[p].len() >= min + need) {
            chunks[p].end -= need;
            chunks[i].start -= need;
        } else if let Some(n) = next.filter(|&n| chunks[n].len() >= min + need) {
            chunks[n].start += need;
            chunks[i].end += need;
        }
        // Otherwise max_retrieve < 2 * min_retrieve - 1 and no repair keeps
        // both bounds; the hard upper bound wins.
        i += 1;
    }
    chunks
}

/// Window spans relative to a parent of `parent_len` tokens.
pub fn window_spans(parent_len: usize, cfg: &ChunkingConfig) -> Vec<TokenSpan> {
    let w = cfg.window_tokens;
    let stride = cfg.stride_tokens;
    let mut spans: Vec<TokenSpan> = (0..parent_len)
        .step_by(stride)
        .map(|start| TokenSpan {
            start,
            end: (start + w).min(parent_len),
        })
        .collect();
    if spans.len() > 1 {
        let tail = spans[spans.len() - 1].len();
        if tail < cfg.min_tail_tokens && tail <= cfg.overlap_tokens() {
            spans.pop();
        }
    }
    spans
}

fn retrieve_chunks_from_tokens(
    doc: &Document,
    tokens: &[Token],
    cfg: &ChunkingConfig,
) -> Result<Vec<RetrieveChunk>> {
    let spans = retrieve_spans(
        tokens.len(),
        doc.structure_hints.iter().map(|m| m.token_offset),
        cfg,
    );
    spans
        .into_iter()
        .enumerate()
        .map(|(ordinal, span)| {
            let text = detokenize(&doc.text, tokens, span)?.to_owned();
            Ok(RetrieveChunk {
                retrieve_id: RetrieveId(chunk_digest(&doc.doc_id, span, Layer::Retrieve, &text)),
                doc_id: doc.doc_id.clone(),
                span,
                text,
                ordinal,
            })
        })
        .collect()
}

pub fn create_retrieve_chunks(doc: &Document, cfg: &ChunkingConfig) -> Result<Vec<RetrieveChunk>> {
    cfg.validate()?;
    retrieve_chunks_from_tokens(doc, &doc.tokens(), cfg)
}

pub fn create_search_chunks(parent: &RetrieveChunk, cfg: &ChunkingConfig) -> Result<Vec<SearchChunk>> {
    cfg.validate()?;
    let tokens = tokenize(&parent.text);
    if tokens.len() != parent.span.len() {
        return Err(Error::Contract(format!(
            "parent {} has {} tokens but spans {}",
            parent.retrieve_id,
            tokens.len(),
            parent.span.len()
        )));
    }
    window_spans(tokens.len(), cfg)
        .into_iter()
        .enumerate()
        .map(|(window_ordinal, rel)| {
            let text = detokenize(&parent.text, &tokens, rel)?.to_owned();
            let span = TokenSpan {
                start: parent.span.start + rel.start,
                end: parent.span.start + rel.end,
            };
            Ok(SearchChunk {
                search_id: SearchId(chunk_digest(&parent.doc_id, span, Layer::Search, &text)),
                retrieve_id: parent.retrieve_id,
                doc_id: parent.doc_id.clone(),
                span,
                text,
                window_ordinal,
            })
        })
        .collect()
}

pub fn chunk_document(doc: &Document, cfg: &ChunkingConfig) -> Result<ChunkedDocument> {
    cfg.validate()?;
    let tokens = doc.tokens();
    let retrieve = retrieve_chunks_from_tokens(doc, &tokens, cfg)?;
    let mut search = Vec::new();
    for parent in &retrieve {
        search.extend(create_search_chunks(parent, cfg)?);
    }
    let mapping = search.iter().map(|s| (s.search_id, s.retrieve_id)).collect();
    Ok(ChunkedDocument {
        retrieve,
        search,
        mapping,
    })
}
