use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid scene state: {0}")]
    InvalidState(String),
    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed record: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: png export failed: {msg}")]
    Image { path: PathBuf, msg: String },
}

impl EnvError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EnvError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        EnvError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
