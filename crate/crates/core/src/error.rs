use std::path::PathBuf;

use thiserror::Error;

/// Every failure the engine can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("singular metric: {0}")]
    SingularMetric(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("incomplete snapshot: {0}")]
    IncompleteSnapshot(String),

    #[error("non-finite value in layer {layer}: {detail}")]
    Numeric { layer: usize, detail: String },

    #[error("stale activation cache: {0}")]
    State(String),

    #[error("{path}: format error at byte {offset}: {detail}")]
    FormatAtByte {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("{path}: format error at line {line}: {detail}")]
    FormatAtLine {
        path: PathBuf,
        line: u64,
        detail: String,
    },

    #[error("config error at line {line}: {detail}")]
    Config { line: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the filesystem rather than by bad input values.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
