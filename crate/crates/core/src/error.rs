use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate. Each variant maps onto one CLI exit code.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, ranges, signs).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numeric input fell in the singular set of an operation.
    #[error("domain error in {op} at index {index}: {detail}")]
    Domain {
        op: &'static str,
        index: usize,
        detail: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing path: {}", .0.display())]
    MissingPath(PathBuf),

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("integrity error at byte offset {offset}: {detail}")]
    Integrity { offset: usize, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 configuration, 3 data/integrity, 4 contract violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::MissingPath(_) => 2,
            Error::Parse { .. } | Error::Integrity { .. } | Error::Data(_) | Error::Io { .. } => 3,
            Error::Contract(_) | Error::Domain { .. } => 4,
        }
    }
}
