//! Error type shared by the model, inference, training and planning code.

use obai_env::EnvError;
use obai_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObaiError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}: {msg}")]
    Io { path: std::path::PathBuf, msg: String },
}

impl ObaiError {
    pub(crate) fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            msg: e.to_string(),
        }
    }
}
