use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid user-supplied configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: schema error: {message}")]
    Schema { line: usize, message: String },

    #[error("incompatible checkpoints at tensor `{tensor}`: {reason}")]
    Incompatible { tensor: String, reason: String },

    #[error("no quantization mapping for tensor `{0}`")]
    Mapping(String),

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("invalid checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by bad inputs or configuration rather than by
    /// a failure while running.
    pub fn is_usage_error(&self) -> bool {
        matches!(
            self,
            Error::Contract(_)
                | Error::Config(_)
                | Error::Dimension { .. }
                | Error::Incompatible { .. }
                | Error::Mapping(_)
        )
    }
}
