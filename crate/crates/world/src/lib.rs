//! A procedural world of glyph scenes for subject-conditioned generation.
//!
//! Each glyph identity has a fixed outline and palette. Scenes place one to
//! four identities on a colored field in one of three styles and come with
//! a caption from a small grammar, a panoptic mask and the ground-truth
//! pairing between noun phrases and segments. The dataset pipeline chunks
//! captions into phrases, matches phrases to segments greedily and cuts
//! background-noised subject crops for training.

pub mod color;
pub mod error;
pub mod grammar;
pub mod identity;
pub mod io;
pub mod matching;
pub mod render;
pub mod sample;
pub mod scene;
pub mod vocab;

pub use error::{Result, WorldError};
pub use grammar::{chunk_phrases, parse_caption, Chunked, ParsedCaption, PhraseSpan};
pub use identity::{GlyphIdentity, ShapeParams};
pub use matching::{greedy_assign, greedy_match, MatchPair, Matching};
pub use render::BBox;
pub use sample::{build_training_sample, scene_to_sample, TrainingSample, CROP_SIZE};
pub use scene::{generate_world, Scene, Segment, Split, World, WorldConfig};
pub use vocab::{Hue, Style, VOCAB_SIZE};
