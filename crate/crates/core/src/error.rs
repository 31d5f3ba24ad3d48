//! Shared error type for the whole laboratory.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Matrix shapes do not chain for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A factorization pivot fell below the rank tolerance.
    #[error("rank deficiency: {0}")]
    Rank(String),

    /// A dataset, schedule, or experiment specification is inconsistent.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// A file did not match its documented format.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Weight or feature geometry is degenerate (zero-norm vector, empty class).
    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    /// A training run produced a non-finite loss or parameter.
    #[error("diverged at epoch {epoch}: {msg}")]
    Diverged { epoch: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
