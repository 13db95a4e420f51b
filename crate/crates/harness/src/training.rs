//! Training loop with deterministic batches, checkpoint resume and a lock
//! file per output directory.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use glyphcomp_core::{
    apply_subject_dropout, forward_diffuse, noise_loss, sample_condition_mode, training_step, Adam, AdamConfig, ComposerModel,
    ConditionMode, CoreError, GridShape, LatentGrid, NoiseSchedule, ParamStore, SegmentationMask, TrainingItem,
};
use glyphcomp_world::scene::derived_rng;
use glyphcomp_world::{generate_world, scene_to_sample, Split, World};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const SUMMARY_FILE: &str = "train_summary.json";
pub const LOCK_FILE: &str = ".lock";

const TRAIN_STREAM: u64 = 0x7a11;
const VAL_STREAM: u64 = 0x7a12;

/// Held while a training run owns its output directory.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock> {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(HarnessError::Locked(dir.to_path_buf())),
            Err(e) => Err(HarnessError::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn normal_grid(shape: GridShape, rng: &mut impl Rng) -> LatentGrid<f32> {
    let data = (0..shape.len())
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v as f32
        })
        .collect();
    LatentGrid { shape, data }
}

/// Pixels covered by any subject of the scene.
fn subject_region(panoptic: &[u8], h: usize, w: usize) -> SegmentationMask {
    SegmentationMask::from_fn(h, w, |y, x| panoptic[y * w + x] != 0)
}

/// Item `b` of batch `step`, drawn only from `(seed, step, b)`.
pub fn make_item(world: &World, cfg: &ExperimentConfig, seed: u64, step: u64, b: usize) -> Result<(TrainingItem<f32>, u64)> {
    let tc = &cfg.train;
    let mut rng = derived_rng(seed, TRAIN_STREAM, step * tc.batch as u64 + b as u64);
    let index = rng.random_range(0..tc.scenes);
    let scene = world.scene(Split::Train, index)?;
    let sample = scene_to_sample(&scene, tc.match_threshold, rng.random())?;
    let mode = sample_condition_mode(&tc.modes, &mut rng)?;
    let subjects = apply_subject_dropout(sample.subjects, tc.subject_dropout, &mut rng);
    let region = (rng.random::<f64>() < tc.region_prob).then(|| subject_region(&scene.panoptic, scene.height(), scene.width()));
    let t = rng.random_range(1..=cfg.schedule.steps);
    let noise = normal_grid(sample.image.shape, &mut rng);
    let z0 = sample.image.map(|v| 2.0 * v - 1.0);
    Ok((TrainingItem { z0, tokens: sample.tokens, subjects, mode, region, t, noise }, index))
}

pub fn make_batch(world: &World, cfg: &ExperimentConfig, seed: u64, step: u64) -> Result<(Vec<TrainingItem<f32>>, String)> {
    let mut hasher = Sha256::new();
    let mut items = Vec::with_capacity(cfg.train.batch);
    for b in 0..cfg.train.batch {
        let (it, index) = make_item(world, cfg, seed, step, b)?;
        hasher.update(index.to_le_bytes());
        hasher.update((it.t as u64).to_le_bytes());
        hasher.update([it.mode as u8, it.subjects.len() as u8, it.region.is_some() as u8]);
        hasher.update(it.noise.data[0].to_le_bytes());
        items.push(it);
    }
    let hash = hasher.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect();
    Ok((items, hash))
}

/// Fixed held-out items for measuring the noise loss; they depend on the
/// world only, so every seed and arm is measured on the same items.
pub fn validation_items(world: &World, cfg: &ExperimentConfig) -> Result<Vec<TrainingItem<f32>>> {
    (0..cfg.train.val_items as u64)
        .map(|i| {
            let mut rng = derived_rng(cfg.world_seed, VAL_STREAM, i);
            let scene = world.scene(Split::Heldout, i)?;
            let sample = scene_to_sample(&scene, cfg.train.match_threshold, rng.random())?;
            let t = rng.random_range(1..=cfg.schedule.steps);
            let noise = normal_grid(sample.image.shape, &mut rng);
            let z0 = sample.image.map(|v| 2.0 * v - 1.0);
            Ok(TrainingItem { z0, tokens: sample.tokens, subjects: sample.subjects, mode: ConditionMode::Full, region: None, t, noise })
        })
        .collect()
}

/// Mean unmasked noise loss over `items`.
pub fn mean_noise_loss(model: &ComposerModel<f32>, items: &[TrainingItem<f32>], schedule: &NoiseSchedule) -> Result<f64> {
    let mut sum = 0.0;
    for it in items {
        let z_t = forward_diffuse(&it.z0, it.t, &it.noise, schedule)?;
        let built = model.build_conditioning(it.mode, &it.tokens, &it.subjects)?;
        let (out, _) = model.denoise(&z_t, it.t, &built.rows)?;
        sum += noise_loss(&it.noise, &out.eps_hat, None)?.0 as f64;
    }
    Ok(sum / items.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: u64,
    pub loss: f64,
    pub noise: f64,
    pub loc: f64,
    pub loc_samples: usize,
    pub loc_warnings: usize,
    pub batch: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub seed: u64,
    pub lambda: f64,
    pub steps: u64,
    pub batch: usize,
    pub val_noise_initial: f64,
    pub val_noise_final: f64,
    /// Step this invocation started from.
    pub resumed_from: u64,
    /// Wall time of this invocation.
    pub seconds: f64,
}

pub fn adam_config(cfg: &ExperimentConfig) -> AdamConfig {
    AdamConfig { lr: cfg.train.lr, beta1: cfg.train.beta1, beta2: cfg.train.beta2, ..AdamConfig::default() }
}

/// Freshly initialized model for `seed`.
pub fn init_model(cfg: &ExperimentConfig, seed: u64) -> Result<ComposerModel<f32>> {
    Ok(ComposerModel::new(cfg.model.clone(), seed)?)
}

/// Loads a trained model for sampling, using the averaged weights when the
/// checkpoint has them.
pub fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<(ComposerModel<f32>, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let mut model = init_model(cfg, 0)?;
    ck.restore_params(&mut model.params, path)?;
    if let Some(ema) = ck.ema(&model.params, path)? {
        for (t, e) in model.params.tensors_mut().iter_mut().zip(ema) {
            t.data = e;
        }
    }
    Ok((model, ck))
}

/// Exponential moving average of the weights, with the usual short warm-up
/// so early averages are not dominated by the initialization.
pub fn ema_update(ema: &mut [Vec<f32>], params: &ParamStore<f32>, decay: f64, step: u64) {
    let d = decay.min((1.0 + step as f64) / (10.0 + step as f64)) as f32;
    for (e, t) in ema.iter_mut().zip(params.tensors()) {
        for (a, &p) in e.iter_mut().zip(&t.data) {
            *a = d * *a + (1.0 - d) * p;
        }
    }
}

fn read_log(path: &Path, keep_below: u64) -> Result<String> {
    if !path.exists() {
        return Ok(String::new());
    }
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let mut out = String::new();
    for line in text.lines() {
        let l: LogLine = serde_json::from_str(line).map_err(|e| HarnessError::format(path, e.to_string()))?;
        if l.step < keep_below {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Trains `cfg.train.steps` steps for `seed` into `out`, resuming from
/// `out/checkpoint.bin` when it exists. A finished run is left untouched.
pub fn train(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<TrainSummary> {
    Ok(train_until(cfg, seed, out, cfg.train.steps)?.expect("runs to the end"))
}

/// Like [`train`] but stops after step `stop`, writing a checkpoint there.
/// Returns `None` when it stopped before the configured end.
pub fn train_until(cfg: &ExperimentConfig, seed: u64, out: &Path, stop: u64) -> Result<Option<TrainSummary>> {
    let _lock = DirLock::acquire(out)?;
    let hash = cfg.hash();
    let world = generate_world(cfg.world.clone(), cfg.world_seed)?;
    let schedule = cfg.schedule()?;
    let ck_path = out.join(CHECKPOINT_FILE);
    let summary_path = out.join(SUMMARY_FILE);
    let log_path = out.join(LOG_FILE);

    let mut model = init_model(cfg, seed)?;
    let val = validation_items(&world, cfg)?;
    let val_initial = mean_noise_loss(&model, &val, &schedule)?;
    let mut opt = Adam::new(adam_config(cfg), &model.params);
    let mut ema = (cfg.train.ema_decay > 0.0).then(|| model.params.tensors().iter().map(|t| t.data.clone()).collect::<Vec<_>>());
    let mut start = 0;
    if ck_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        if ck.config_hash != hash {
            return Err(HarnessError::checkpoint(&ck_path, format!("written for config {}, current config is {hash}", ck.config_hash)));
        }
        if ck.step > cfg.train.steps {
            return Err(HarnessError::checkpoint(&ck_path, format!("already at step {} beyond the configured {}", ck.step, cfg.train.steps)));
        }
        opt = ck.restore_training(&mut model, adam_config(cfg), &ck_path)?;
        ema = ck.ema(&model.params, &ck_path)?;
        if ema.is_none() != (cfg.train.ema_decay == 0.0) {
            return Err(HarnessError::checkpoint(&ck_path, "weight average does not match ema_decay"));
        }
        start = ck.step;
        log::info!("resuming {} from step {start}", out.display());
    }
    if start == cfg.train.steps && summary_path.exists() {
        let text = fs::read_to_string(&summary_path).map_err(|e| HarnessError::io(&summary_path, e))?;
        let s: TrainSummary = serde_json::from_str(&text).map_err(|e| HarnessError::format(&summary_path, e.to_string()))?;
        if s.config_hash == hash && s.seed == seed {
            return Ok(Some(s));
        }
    }

    let mut log = read_log(&log_path, start + 1)?;
    let timer = Instant::now();
    let end = stop.min(cfg.train.steps);
    for step in start..end {
        let (items, batch_hash) = make_batch(&world, cfg, seed, step)?;
        let res = training_step(&mut model, &mut opt, &items, &schedule, cfg.train.lambda, cfg.train.clip, step + 1).map_err(|e| match e {
            CoreError::Divergence { .. } => {
                let last = if ck_path.exists() { ck_path.display().to_string() } else { "none".into() };
                HarnessError::Diverged(e, last)
            }
            other => other.into(),
        })?;
        if let Some(e) = ema.as_mut() {
            ema_update(e, &model.params, cfg.train.ema_decay, step);
        }
        let line = LogLine {
            step: step + 1,
            loss: res.loss.total,
            noise: res.loss.noise,
            loc: res.loss.loc,
            loc_samples: res.loc_samples,
            loc_warnings: res.loc_warnings,
            batch: batch_hash,
        };
        log.push_str(&serde_json::to_string(&line).expect("log line serializes"));
        log.push('\n');
        let done = step + 1;
        if done % cfg.train.checkpoint_every == 0 || done == end {
            Checkpoint::from_training(&model, &opt, ema.as_deref(), &hash, done).save(&ck_path)?;
            fs::write(&log_path, &log).map_err(|e| HarnessError::io(&log_path, e))?;
            log::info!("{}: step {done}/{} loss {:.4} noise {:.4} loc {:.4}", out.display(), cfg.train.steps, line.loss, line.noise, line.loc);
        }
    }
    if end < cfg.train.steps {
        return Ok(None);
    }
    if start == cfg.train.steps {
        // Checkpoint was complete but the summary was missing.
        Checkpoint::from_training(&model, &opt, ema.as_deref(), &hash, start).save(&ck_path)?;
    }
    let mut sampler_model = model.clone();
    if let Some(e) = &ema {
        for (t, v) in sampler_model.params.tensors_mut().iter_mut().zip(e) {
            t.data.clone_from(v);
        }
    }
    let summary = TrainSummary {
        config_hash: hash,
        seed,
        lambda: cfg.train.lambda,
        steps: cfg.train.steps,
        batch: cfg.train.batch,
        val_noise_initial: val_initial,
        val_noise_final: mean_noise_loss(&sampler_model, &val, &schedule)?,
        resumed_from: start,
        seconds: timer.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&summary_path, json).map_err(|e| HarnessError::io(&summary_path, e))?;
    Ok(Some(summary))
}
