//! Diffusion model for compositional generation of reference subjects.
//!
//! A frozen text encoder produces one embedding per prompt token. Reference
//! subject crops are encoded and fused into the embedding of the token that
//! names them. A small U-Net predicts noise under that conditioning; its
//! cross-attention maps can be pushed towards subject masks with a
//! localization loss. At sampling time the fused conditioning is only used
//! for the final part of the trajectory.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). Training
//! runs in `f32`; `f64` is used for gradient checks.

pub mod denoiser;
pub mod encoders;
pub mod error;
pub mod localization;
pub mod model;
pub mod nn;
pub mod params;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use denoiser::{AttentionRecord, Denoiser, DenoiserConfig, DenoiserOutput};
pub use encoders::{
    apply_subject_dropout, augment_conditioning, sample_condition_mode, AugmentedConditioning, ConditionMode, ConditioningMatrix,
    ModeProbabilities, SubjectRef,
};
pub use error::{CoreError, Result};
pub use localization::{
    balanced_l1, downsample_mask, localization_loss, total_loss, LocalizationLoss, LossBreakdown, SegmentationMask, DEFAULT_LAMBDA,
};
pub use model::{ComposerModel, ModelConfig};
pub use params::{Grads, ParamStore};
pub use sampler::{sample, uses_augmented, SampleOutput, SamplerConfig, StepTrace};
pub use scalar::Scalar;
pub use schedule::{forward_diffuse, make_schedule, NoiseSchedule};
pub use tensor::{GridShape, LatentGrid, Mat};
pub use train::{loss_and_grads, noise_loss, training_step, Adam, AdamConfig, BatchResult, TrainingItem};

pub type Model32 = ComposerModel<f32>;
pub type Model64 = ComposerModel<f64>;
pub type Grid32 = LatentGrid<f32>;
pub type Grid64 = LatentGrid<f64>;
pub type SubjectRef32 = SubjectRef<f32>;
pub type TrainingItem32 = TrainingItem<f32>;
