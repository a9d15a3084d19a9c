use std::path::PathBuf;

use thiserror::Error;

use crate::runner::RunTrace;

pub type Result<T> = std::result::Result<T, GddError>;

#[derive(Debug, Error)]
pub enum GddError {
    #[error("shape mismatch in {context}: {lhs} vs {rhs}")]
    ShapeMismatch {
        context: String,
        lhs: String,
        rhs: String,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("{path}: {source}")]
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

    /// The optimization loss became non-finite. Carries the last finite
    /// trace so callers can still inspect or persist the run history.
    #[error("loss became non-finite at iteration {iteration}")]
    NumericalAbort { iteration: usize, trace: RunTrace },
}

impl GddError {
    pub fn shape(
        context: impl Into<String>,
        lhs: impl ToString,
        rhs: impl ToString,
    ) -> Self {
        GddError::ShapeMismatch {
            context: context.into(),
            lhs: lhs.to_string(),
            rhs: rhs.to_string(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        GddError::Invalid(message.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GddError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        GddError::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
