//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by tensor ops, the network, data generation and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expected layout) disagree on shape.
    /// The message always names both shapes.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A numeric result left the finite range (NaN or Inf).
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Configuration file problem, with the 1-based line number when known.
    #[error("config error (line {line}): {msg}")]
    Config { line: usize, msg: String },

    /// A binary file failed validation (bad magic, truncated payload, ...).
    #[error("bad file format: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
