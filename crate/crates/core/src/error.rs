use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library.
///
/// Variants are split along the line the CLI cares about: [`SmcError::is_numerical`]
/// marks failures of the optimization or density math, everything else is a
/// problem with the caller's inputs.
#[derive(Debug, Error)]
pub enum SmcError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("output kind mismatch: {0}")]
    KindMismatch(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SmcError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        SmcError::InvalidArgument(msg.into())
    }

    pub fn file(path: impl Into<PathBuf>, message: impl std::fmt::Display) -> Self {
        SmcError::File {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, SmcError::Divergence(_))
    }
}

pub type Result<T> = std::result::Result<T, SmcError>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(SmcError::DimensionMismatch { expected, got })
    }
}
