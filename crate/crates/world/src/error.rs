use thiserror::Error;

pub type Result<T, E = WorldError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("world configuration error: {0}")]
    Config(String),
    #[error("caption parse error at token {position}: {message}")]
    Parse { position: usize, message: String },
    #[error("training sample error: {0}")]
    Sample(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Core(#[from] glyphcomp_core::CoreError),
}

impl WorldError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        WorldError::Io { path: path.display().to_string(), source }
    }

    pub(crate) fn format(path: &std::path::Path, message: impl Into<String>) -> Self {
        WorldError::Format { path: path.display().to_string(), message: message.into() }
    }
}
