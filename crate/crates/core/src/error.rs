use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
///
/// Variants are grouped by the exit-code class the command line maps them to:
/// schema-like problems (bad files, keys, formats), domain violations, and
/// degenerate inputs that make a statistic undefined.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("duplicate key `{0}`")]
    DuplicateKey(String),

    #[error("invalid geometry for area `{area}`: {message}")]
    Geometry { area: String, message: String },

    #[error("key `{key}` missing from {table}")]
    MissingKey { key: String, table: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty selection: {0}")]
    EmptySelection(String),

    #[error("census population is zero for area `{0}`")]
    DegenerateDenominator(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),
}

/// Coarse error classes, used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Schema,
    Domain,
    Degenerate,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Schema(_)
            | Error::DuplicateKey(_)
            | Error::Geometry { .. }
            | Error::MissingKey { .. } => ErrorKind::Schema,
            Error::Domain(_) | Error::EmptySelection(_) => ErrorKind::Domain,
            Error::DegenerateDenominator(_) | Error::DegenerateInput(_) => ErrorKind::Degenerate,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn domain(message: impl Into<String>) -> Self {
        Error::Domain(message.into())
    }

    pub(crate) fn schema(message: impl Into<String>) -> Self {
        Error::Schema(message.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
