//! Experiment harness: configuration, checkpoints, training, evaluation
//! campaigns and reporting behind the `glyphcomp` command.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod report;
pub mod training;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
