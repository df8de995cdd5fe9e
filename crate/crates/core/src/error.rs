use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error in {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("cannot parse {value:?} as a number (row {row}, column {column:?})")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("missing column {0:?}")]
    MissingColumn(String),

    #[error("locations {first} and {second} coincide")]
    DuplicateLocation { first: usize, second: usize },

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParams { field: &'static str, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("fit failed: {0}")]
    FitFailed(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn params(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParams {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 validation, 3 numerical failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Csv { .. } | Error::Serde(_) => 4,
            Error::NotPositiveDefinite(_) | Error::Singular(_) | Error::FitFailed(_) => 3,
            Error::Parse { .. }
            | Error::MissingColumn(_)
            | Error::DuplicateLocation { .. }
            | Error::InvalidParams { .. }
            | Error::InvalidInput(_) => 2,
        }
    }
}
