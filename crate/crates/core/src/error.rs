use thiserror::Error;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown token id {id} (vocabulary size {vocab})")]
    Vocabulary { id: usize, vocab: usize },
    #[error("conditioning error: {0}")]
    Conditioning(String),
    #[error("token index {index} out of range for prompt of length {len}")]
    Index { index: usize, len: usize },
    #[error("diffusion step {t} outside 1..={steps}")]
    Step { t: usize, steps: usize },
    #[error("loss error: {0}")]
    Loss(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },
}
