//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op}: {detail}")]
    Numeric { op: String, detail: String },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    VocabId { id: usize, vocab: usize },

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("corpus ingestion failed: {0}")]
    Ingestion(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("gradient check invalid: {0}")]
    CheckInvalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
