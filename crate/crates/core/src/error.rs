use std::path::PathBuf;

/// Errors raised across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum PieError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown corpus format `{0}` (expected jsonl, csv or dialogue-json)")]
    UnknownFormat(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid span: {0}")]
    InvalidSpan(String),

    #[error("unknown tag `{0}`")]
    UnknownTag(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("invalid class split: {0}")]
    InvalidSplit(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("backend error: {0}")]
    Backend(String),
}

impl PieError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PieError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        PieError::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, PieError>;
