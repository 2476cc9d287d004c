//! Small-to-big retrieval engine: small overlapping search chunks are
//! embedded and indexed, while larger structure-aware retrieve chunks are
//! returned as context.
//!
//! The usual entry points are [`Engine`] for building and opening indexes,
//! [`query::retrieve`] for queries and [`updater`] for incremental changes.

pub mod chunker;
pub mod embedding;
pub mod engine;
pub mod error;
pub mod eval;
pub mod ids;
pub mod ingest;
pub mod query;
pub mod storage;
pub mod updater;
pub mod vector_index;

pub use chunker::ChunkingConfig;
pub use embedding::{EmbedderSpec, EmbeddingVector, Provider};
pub use engine::{Engine, EngineConfig};
pub use error::{Error, Result};
pub use ids::{RetrieveId, SearchId};
pub use ingest::Document;
pub use query::{retrieve, QueryRequest, RetrievalResult};
pub use vector_index::{Backend, HnswParams};
