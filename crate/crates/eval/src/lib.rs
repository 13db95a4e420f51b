//! Metrics for generated glyph scenes.
//!
//! Glyphs are found by color separation from the field. Identity
//! preservation matches detections to reference crops with a frozen identity
//! embedder and reports the worst-preserved reference. Prompt consistency
//! checks field color, subject count and style against the caption.

pub mod attention;
pub mod detect;
pub mod embedder;
pub mod error;
pub mod identity;
pub mod prompt;
pub mod report;

pub use attention::attention_iou;
pub use detect::{detect_subjects, masked_crop, Detection, DetectorConfig};
pub use embedder::{cosine, identity_similarity, EmbedderConfig, IdentityEmbedder};
pub use error::{EvalError, Result};
pub use identity::{multi_subject_identity_score, reference_crop, score_from_similarities, IdentityScore};
pub use prompt::{prompt_consistency, PromptCheck};
pub use report::{campaign_csv, read_campaign_csv, write_campaign_csv, CampaignRow, MetricsReport};
