//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A convolution layer would produce an empty output for the given input length.
    #[error("window too short for layer {layer}: input length {input_len} yields no output")]
    WindowTooShort { layer: String, input_len: usize },

    /// Invalid configuration or command usage.
    #[error("config error: {0}")]
    Config(String),

    /// A binary file did not start with the expected magic bytes.
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    /// A binary payload was shorter than its header declared.
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    /// A NaN or infinite value where finite data is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Gradient-check registry lookup failed.
    #[error("unknown op {0:?}")]
    UnknownOp(String),

    /// Malformed annotation record.
    #[error("annotation error: {0}")]
    Annotation(String),

    /// Checkpoint decode or compatibility failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Numeric failure at runtime (NaN loss, degenerate statistics, ...).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("invalid json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
