use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index {index} out of range for {op} (limit {limit})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("data quality: {0}")]
    DataQuality(String),

    #[error("cannot place minutia with spacing {spacing} after {attempts} attempts")]
    Density { spacing: f64, attempts: usize },

    #[error("backward already consumed this tape; record a new computation")]
    TapeConsumed,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("open-set gallery: {0}")]
    OpenSet(String),

    #[error("config validation failed: {0}")]
    Validation(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 for problems with the caller's inputs, 2 for
    /// runtime or numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape { .. }
            | Error::IndexOutOfRange { .. }
            | Error::InvalidInput(_)
            | Error::DataQuality(_)
            | Error::Density { .. }
            | Error::OpenSet(_)
            | Error::Validation(_)
            | Error::Version { .. }
            | Error::Json { .. } => 1,
            Error::TapeConsumed | Error::Numeric(_) | Error::Io { .. } => 2,
        }
    }
}
