//! Error types shared across the library.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Input is structurally valid but numerically degenerate (zero norm, empty axis, ...).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A configuration violates its invariants.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A computation produced or encountered non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The caller used an API out of contract (missing cache, too few probes, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A serialized artifact could not be decoded; `offset` is the byte position
    /// at which decoding failed.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
