use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the adaptation pipeline.
#[derive(Debug, Error)]
pub enum SageError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("pretraining did not reach the in-distribution target: {0}")]
    Pretraining(String),

    #[error("cluster too small for training: {have} samples, need at least {need}")]
    ClusterTooSmall { have: usize, need: usize },

    #[error("data error at {path}:{line}: {message}")]
    Data {
        path: String,
        line: usize,
        message: String,
    },

    #[error("failed to load {}: {field}: {message}", path.display())]
    Load {
        path: PathBuf,
        field: String,
        message: String,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SageError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SageError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, field: impl Into<String>, message: impl ToString) -> Self {
        SageError::Load {
            path: path.into(),
            field: field.into(),
            message: message.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, SageError>;
