use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every layer of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Logged data violates the sampling assumptions (e.g. a logged action
    /// the logging policy could never have produced).
    #[error("data integrity violation at sample {index}: {reason}")]
    DataIntegrity { index: usize, reason: String },

    #[error("estimation failed at sample {index}: {reason}")]
    Estimation { index: usize, reason: String },

    #[error("estimation failed: {0}")]
    Degenerate(String),

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    /// Well-formed input whose values fall outside the allowed domain.
    #[error("{path}:{line}: invalid data: {reason}")]
    Data {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("tau selection failed: {0}")]
    Selection(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_) | Error::Config(_) | Error::Parse { .. } | Error::Data { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
