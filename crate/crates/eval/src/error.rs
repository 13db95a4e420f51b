use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("similarity undefined: {0}")]
    Similarity(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    World(#[from] glyphcomp_world::WorldError),
    #[error(transparent)]
    Core(#[from] glyphcomp_core::CoreError),
}

impl EvalError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        EvalError::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        EvalError::Format { path: path.to_path_buf(), message: message.into() }
    }
}
