use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("output directory {0} is locked by another training process")]
    Locked(PathBuf),
    #[error("{0}; last good checkpoint: {1}")]
    Diverged(glyphcomp_core::CoreError, String),
    #[error(transparent)]
    Core(#[from] glyphcomp_core::CoreError),
    #[error(transparent)]
    World(#[from] glyphcomp_world::WorldError),
    #[error(transparent)]
    Eval(#[from] glyphcomp_eval::EvalError),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        HarnessError::Format { path: path.to_path_buf(), message: message.into() }
    }

    pub fn checkpoint(path: &Path, message: impl Into<String>) -> Self {
        HarnessError::Checkpoint { path: path.to_path_buf(), message: message.into() }
    }

    /// Process exit code: 1 for configuration problems, 2 for everything
    /// that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Core(glyphcomp_core::CoreError::Config(_)) => 1,
            HarnessError::World(glyphcomp_world::WorldError::Config(_)) => 1,
            _ => 2,
        }
    }
}
