use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Check,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: row {row}: {reason}")]
    MalformedRow {
        path: PathBuf,
        row: usize,
        reason: String,
    },

    #[error("class out of range: {field} id {id} not in [0, {limit})")]
    ClassOutOfRange {
        field: &'static str,
        id: i64,
        limit: usize,
    },

    #[error("unsatisfiable window: segment starts at {start_s}s, nothing observable before {end_s}s")]
    UnsatisfiableWindow { start_s: f64, end_s: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("stale tape: {0}")]
    StaleTape(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("check failed: {0}")]
    Check(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Check(_) | Error::Schema(_) | Error::Protocol(_) => ErrorKind::Check,
            Error::Context { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }
}
