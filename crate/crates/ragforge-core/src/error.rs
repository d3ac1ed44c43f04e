//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty document {doc_id:?}")]
    EmptyDocument { doc_id: String },

    #[error("document {doc_id:?}: {reason}")]
    MalformedDocument { doc_id: String, reason: String },

    #[error("{path}:{line}: {reason}")]
    MalformedLine {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch: {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("k={k} out of range for index of {len} vectors")]
    KOutOfRange { k: usize, len: usize },

    #[error("search on empty index")]
    EmptyIndex,

    #[error("unknown passage id {0}")]
    UnknownPassage(usize),

    #[error("refresh job {job_id}: {reason}")]
    RefreshFailed { job_id: u64, reason: String },

    #[error("index swap would not advance version: current {current}, offered {offered}")]
    StaleSwap { current: u64, offered: u64 },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("digest mismatch: {context}: expected {expected}, got {actual}")]
    DigestMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("positive passage {0} duplicated among negatives")]
    PositiveAmongNegatives(usize),

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
