use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("range error: {0}")]
    Range(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corrupt {file}: {reason}")]
    Corrupt { file: String, reason: String },

    #[error("embedder fingerprint mismatch: index was built with `{expected}`, query uses `{found}`")]
    FingerprintMismatch { expected: String, found: String },

    #[error("transport error after {attempts} attempt(s) (retryable: {retryable}): {message}")]
    Transport {
        message: String,
        attempts: u32,
        retryable: bool,
    },

    #[error("index directory {0} is locked by another writer")]
    Locked(PathBuf),

    #[error("index directory {0} already contains an index")]
    IndexExists(PathBuf),

    #[error("injected failure after stage `{0}`")]
    Injected(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(file: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            file: file.into(),
            reason: reason.into(),
        }
    }
}
