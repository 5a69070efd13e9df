use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the attack, encoder and evaluation layers.
#[derive(Debug, Error)]
pub enum UapError {
    #[error("invalid value: {0}")]
    InvalidValue(String),

    /// A caller violated an operation's precondition (shapes, bounds, normalization).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("optimization diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl UapError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        UapError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        UapError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = UapError> = std::result::Result<T, E>;
