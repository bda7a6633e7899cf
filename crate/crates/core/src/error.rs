use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("molecule '{id}': {msg}")]
    Validation { id: String, msg: String },

    #[error("unknown element symbol(s): {}", .0.join(", "))]
    UnknownElement(Vec<String>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite activation after layer {0}")]
    NonFinite(String),

    #[error("missing modality: {0}")]
    Modality(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(id: &str, msg: impl Into<String>) -> Self {
        Error::Validation {
            id: id.to_string(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad inputs or configuration rather than by
    /// a failure while running.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::NonFinite(_) | Error::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
