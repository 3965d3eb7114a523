//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid argument or configuration value.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// A NaN or infinity was produced or read where finite data is required.
    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: String, index: usize },

    /// `backward` was called twice on the same tape without a new forward pass.
    #[error("stale tape: backward has already consumed this tape")]
    StaleTape,

    /// `backward` root node is not a scalar.
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("unknown domain '{0}'")]
    UnknownDomain(String),

    /// A class does not have enough labeled pixels for the requested split.
    #[error("class '{name}' has {available} labeled pixels, need more than {requested}")]
    ClassTooSmall {
        name: String,
        available: usize,
        requested: usize,
    },

    #[error("empty test set")]
    EmptyTestSet,

    #[error("empty training pool for domain {0}")]
    EmptyTrainingPool(usize),

    /// Raw payload byte count does not match the header.
    #[error("payload size mismatch: expected {expected} bytes, got {got}")]
    PayloadSize { expected: u64, got: u64 },

    /// Malformed file contents (magic, version, field values).
    #[error("bad file format: {0}")]
    Format(String),

    /// Training aborted on a non-finite loss.
    #[error("training diverged: non-finite loss at iteration {iteration}, domain {domain}")]
    Diverged { iteration: u64, domain: usize },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
