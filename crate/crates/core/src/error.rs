use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the anomaly-detection pipeline.
#[derive(Debug, Error)]
pub enum CevaeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input for patient {patient}: {reason}")]
    DegenerateInput { patient: String, reason: String },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("missing file referenced by manifest: {0}")]
    MissingFile(PathBuf),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CevaeError>;

impl CevaeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CevaeError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        CevaeError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(CevaeError::InvalidArgument(msg.into()))
}
