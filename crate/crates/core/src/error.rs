//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are inconsistent for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation produced NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    /// Autograd misuse: missing gradients, non-scalar loss, undetached targets.
    #[error("gradient error: {0}")]
    Grad(String),

    /// Invalid graph structure or cluster assignment.
    #[error("graph error: {0}")]
    Graph(String),

    /// Malformed input data (CSV parsing, window extraction, splits).
    #[error("data error: {0}")]
    Data(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
