use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("near-zero norm ({norm:e}) in row {row} during {op}")]
    NearZeroNorm { op: &'static str, row: usize, norm: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unknown input format `{0}`")]
    UnknownFormat(String),

    #[error("{malformed} of {total} records malformed (limit 10%)")]
    TooManyMalformed { malformed: usize, total: usize },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse failure class, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Shape { .. } | Error::NearZeroNorm { .. } | Error::NonFinite(_) => {
                ErrorKind::Numeric
            }
            Error::Invalid(_) | Error::UnknownFormat(_) => ErrorKind::Usage,
            Error::Io { .. }
            | Error::TooManyMalformed { .. }
            | Error::EmptyCorpus(_)
            | Error::Checkpoint(_)
            | Error::Json(_) => ErrorKind::Data,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
