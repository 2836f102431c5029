//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} has zero norm; cosine similarity is undefined for it")]
    ZeroNormRow { row: usize },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("{context}: set must not be empty")]
    EmptySet { context: String },

    #[error("index {index} out of bounds for ground set of size {size}")]
    OutOfBounds { index: usize, size: usize },

    #[error("ground set of size {size} exceeds the enumeration limit of {limit}")]
    GroundSetTooLarge { size: usize, limit: usize },

    #[error(
        "inter-class term is vacuous: {0}; batches must contain at least two classes, \
         one of them novel"
    )]
    NoInterPairs(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration}: {what}")]
    Divergence { iteration: usize, what: String },

    #[error("argmax tie could not be avoided after {attempts} re-samples")]
    TiesUnresolved { attempts: usize },

    #[error("malformed data file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
