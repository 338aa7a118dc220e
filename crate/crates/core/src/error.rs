//! Error type shared by every module of the toolkit.

use std::path::PathBuf;

/// Errors produced by the tracing toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not agree for the requested operation.
    #[error("dimension error: {0}")]
    Shape(String),

    /// A numeric parameter is outside its allowed range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A metric was evaluated on inputs outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Model manifest, tensor container or weight validation failed.
    #[error("load error: {0}")]
    Load(String),

    /// A hook or patch could not be applied.
    #[error("intervention error: {0}")]
    Intervention(String),

    /// A dataset file is malformed.
    #[error("dataset error at {path}:{line}: {message}")]
    Dataset {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// A sweep or aggregation has nothing numeric to report.
    #[error("degenerate: {0}")]
    Degenerate(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that happen while loading models or data.
    pub fn is_load_error(&self) -> bool {
        matches!(self, Self::Load(_) | Self::Dataset { .. })
    }
}

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
