//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A sequence exceeds the model's context limit.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Training produced NaN/Inf where progress is impossible.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    /// A file is syntactically valid but semantically inconsistent
    /// (wrong shapes, missing tensors, mismatched vocabulary, ...).
    #[error("malformed data: {0}")]
    Malformed(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
