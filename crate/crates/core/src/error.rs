//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch between operands; the message names both shapes.
    #[error("dimension mismatch in {op}: {detail}")]
    Dim { op: &'static str, detail: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A caller broke an API contract (e.g. a coefficient that must stay positive).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training produced a non-finite value; `step` is the global step index.
    #[error("non-finite value ({context}) at step {step}")]
    NonFinite { context: String, step: u64 },

    /// The finite-difference oracle could not evaluate the loss.
    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dim {
            op,
            detail: detail.into(),
        }
    }
}
