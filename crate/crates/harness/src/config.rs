//! Experiment configuration: one JSON document with a schema version whose
//! SHA-256 (output directory excluded) tags every artifact.

use std::fs;
use std::path::Path;

use glyphcomp_core::{make_schedule, ModeProbabilities, ModelConfig, NoiseSchedule, SamplerConfig};
use glyphcomp_eval::{DetectorConfig, EmbedderConfig};
use glyphcomp_world::{WorldConfig, VOCAB_SIZE};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: 100, beta_start: 1e-3, beta_end: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm clip; `null` disables it.
    pub clip: Option<f64>,
    /// Weight of the localization term.
    pub lambda: f64,
    pub modes: ModeProbabilities,
    pub subject_dropout: f64,
    /// Probability that a sample's noise loss covers only its subjects.
    pub region_prob: f64,
    pub match_threshold: f64,
    /// Training scenes are drawn uniformly from the first `scenes` indices.
    pub scenes: u64,
    pub checkpoint_every: u64,
    /// Decay of the weight average used for sampling; 0 samples with the raw
    /// weights.
    pub ema_decay: f64,
    /// Held-out items used to measure the noise loss before and after.
    pub val_items: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            clip: Some(1.0),
            lambda: glyphcomp_core::DEFAULT_LAMBDA,
            modes: ModeProbabilities::default(),
            subject_dropout: 0.1,
            region_prob: 0.5,
            match_threshold: 0.0,
            scenes: 50_000,
            checkpoint_every: 1000,
            ema_decay: 0.999,
            val_items: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub alphas: Vec<f64>,
    /// Held-out identity pairs evaluated (all pairs when fewer exist).
    pub max_pairs: usize,
    pub prompts_per_pair: usize,
    /// Attention values at or above this count as attending.
    pub iou_threshold: f64,
    pub detector: DetectorConfig,
    pub embedder: EmbedderConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            alphas: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            max_pairs: 40,
            prompts_per_pair: 5,
            iou_threshold: 0.3,
            detector: DetectorConfig::default(),
            embedder: EmbedderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub world_seed: u64,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    /// Seeds of the multi-seed experiments.
    pub seeds: Vec<u64>,
    /// Not part of the hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            world_seed: 0,
            world: WorldConfig::default(),
            model: ModelConfig { vocab_size: VOCAB_SIZE, ..ModelConfig::default() },
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
            seeds: vec![0, 1, 2],
            out_dir: None,
        }
    }
}

fn unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(HarnessError::Config(format!("{name} = {v} outside [0, 1]")))
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        match v.get("schema_version").and_then(|s| s.as_u64()) {
            Some(n) if n == CONFIG_SCHEMA_VERSION as u64 => {}
            Some(n) => return Err(HarnessError::Config(format!("unsupported schema_version {n}"))),
            None => return Err(HarnessError::Config("missing schema_version".into())),
        }
        let cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON without the output directory.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig { out_dir: None, ..self.clone() };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(make_schedule(self.schedule.steps, self.schedule.beta_start, self.schedule.beta_end)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(HarnessError::Config(format!("unsupported schema_version {}", self.schema_version)));
        }
        self.world.validate()?;
        self.model.validate()?;
        self.schedule()?;
        self.train.modes.validate()?;
        let t = &self.train;
        if t.batch == 0 || t.scenes == 0 || t.checkpoint_every == 0 {
            return Err(HarnessError::Config("batch, scenes and checkpoint_every must be positive".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) || t.lambda < 0.0 || !t.lambda.is_finite() {
            return Err(HarnessError::Config("lr must be positive and lambda non-negative".into()));
        }
        if t.clip.is_some_and(|c| !(c > 0.0)) {
            return Err(HarnessError::Config("clip must be positive when set".into()));
        }
        unit("beta1", t.beta1)?;
        unit("beta2", t.beta2)?;
        unit("subject_dropout", t.subject_dropout)?;
        unit("region_prob", t.region_prob)?;
        if !(0.0..1.0).contains(&t.ema_decay) {
            return Err(HarnessError::Config(format!("ema_decay {} must lie in [0, 1)", t.ema_decay)));
        }
        if self.model.vocab_size < VOCAB_SIZE {
            return Err(HarnessError::Config(format!("model vocabulary {} is smaller than the caption vocabulary {VOCAB_SIZE}", self.model.vocab_size)));
        }
        if self.model.image.height != self.world.height || self.model.image.width != self.world.width || self.model.image.channels != 3 {
            return Err(HarnessError::Config("model image shape must match the world".into()));
        }
        if self.model.crop_size != glyphcomp_world::CROP_SIZE {
            return Err(HarnessError::Config(format!("subject crops are {} pixels", glyphcomp_world::CROP_SIZE)));
        }
        for &a in &self.eval.alphas {
            unit("alpha", a)?;
        }
        unit("sampler.alpha", self.sampler.alpha)?;
        if !(self.sampler.guidance >= 0.0 && self.sampler.guidance.is_finite()) {
            return Err(HarnessError::Config("guidance must be finite and non-negative".into()));
        }
        if !(self.eval.iou_threshold > 0.0 && self.eval.iou_threshold < 1.0) {
            return Err(HarnessError::Config("iou_threshold must lie in (0, 1)".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("at least one seed is required".into()));
        }
        Ok(())
    }
}
