//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by network construction, verification, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A vector or matrix dimension did not match its contract.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A network invariant was violated (layer composition, output arity, non-finite entries).
    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    /// A configuration value was out of its documented range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A non-finite value appeared where finite arithmetic is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Binary dataset parsing failed; `offset` is the byte position of the failure.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// Dataset invariants violated (label range, length mismatch).
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    /// An operation received an empty batch or dataset.
    #[error("empty batch")]
    EmptyBatch,

    /// Brute-force check refused to run (input dimension too large to enumerate).
    #[error("dimension guard: input dim {0} exceeds limit {1} for exhaustive checking")]
    DimensionGuard(usize, usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
