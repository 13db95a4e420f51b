//! Multi-seed campaigns: localization-loss ablation and the alpha sweep.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use glyphcomp_eval::report::write_reports_jsonl;
use glyphcomp_eval::{write_campaign_csv, CampaignRow, IdentityEmbedder};
use glyphcomp_world::generate_world;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::evaluation::{cached_embedder, eval_cases, evaluate, EvalCase, RunTag};
use crate::training::{init_model, load_model, train, TrainSummary, CHECKPOINT_FILE};

pub const ABLATION_CSV: &str = "ablation.csv";
pub const BASELINE_CSV: &str = "baseline.csv";
pub const SWEEP_CSV: &str = "alpha_sweep.csv";
pub const EMBEDDER_FILE: &str = "embedder.bin";
pub const ABLATION_TIME: &str = "ablation_time.json";
pub const SWEEP_TIME: &str = "sweep_time.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignTime {
    pub config_hash: String,
    /// Wall time of the invocation, including training runs it performed.
    pub seconds: f64,
}

fn write_time(path: &Path, hash: &str, start: Instant) -> Result<()> {
    let t = CampaignTime { config_hash: hash.to_string(), seconds: start.elapsed().as_secs_f64() };
    fs::write(path, serde_json::to_string_pretty(&t).expect("serializes")).map_err(|e| HarnessError::io(path, e))
}

pub fn arm_name(lambda_on: bool) -> &'static str {
    if lambda_on {
        "lambda_on"
    } else {
        "lambda_off"
    }
}

pub fn arm_dir(root: &Path, seed: u64, lambda_on: bool) -> PathBuf {
    root.join(format!("seed_{seed}")).join(arm_name(lambda_on))
}

/// The configuration of one arm: the localization weight is zeroed for the
/// "off" arm, everything else is shared.
pub fn arm_config(cfg: &ExperimentConfig, lambda_on: bool) -> ExperimentConfig {
    let mut c = cfg.clone();
    if !lambda_on {
        c.train.lambda = 0.0;
    }
    c
}

pub fn alpha_label(alpha: f64) -> String {
    format!("{alpha:.2}")
}

struct Campaign {
    embedder: IdentityEmbedder,
    cases: Vec<EvalCase>,
}

impl Campaign {
    fn new(cfg: &ExperimentConfig, out: &Path) -> Result<Campaign> {
        let world = generate_world(cfg.world.clone(), cfg.world_seed)?;
        let embedder = cached_embedder(&world, cfg, &out.join(EMBEDDER_FILE))?;
        let cases = eval_cases(&world, cfg)?;
        Ok(Campaign { embedder, cases })
    }
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub rows: Vec<CampaignRow>,
    pub baseline: Vec<CampaignRow>,
    pub training: Vec<TrainSummary>,
}

/// Trains both arms for every seed (reusing finished runs), evaluates them
/// and the untrained initialization at the configured alpha, and writes
/// `ablation.csv` and `baseline.csv`.
pub fn ablate_loc(cfg: &ExperimentConfig, out: &Path) -> Result<AblationResult> {
    if cfg.train.lambda <= 0.0 {
        return Err(HarnessError::Config("the ablation needs a positive train.lambda".into()));
    }
    let start = Instant::now();
    let hash = cfg.hash();
    let camp = Campaign::new(cfg, out)?;
    let alpha = cfg.sampler.alpha;
    let (mut rows, mut baseline, mut training) = (Vec::new(), Vec::new(), Vec::new());
    for &seed in &cfg.seeds {
        let untrained = init_model(cfg, seed)?;
        let dir = out.join(format!("seed_{seed}")).join("untrained");
        let tag = RunTag { config_hash: &hash, seed, alpha, lambda: cfg.train.lambda };
        let reports = evaluate(&untrained, &camp.embedder, cfg, &camp.cases, tag, Some(&dir.join("images")))?;
        write_reports_jsonl(&dir.join("reports.jsonl"), &reports)?;
        baseline.push(CampaignRow::aggregate(seed, alpha, false, &reports));
        for lambda_on in [false, true] {
            let acfg = arm_config(cfg, lambda_on);
            let dir = arm_dir(out, seed, lambda_on);
            log::info!("training {}", dir.display());
            training.push(train(&acfg, seed, &dir)?);
            let (model, _) = load_model(&acfg, &dir.join(CHECKPOINT_FILE))?;
            let ahash = acfg.hash();
            let tag = RunTag { config_hash: &ahash, seed, alpha, lambda: acfg.train.lambda };
            let reports = evaluate(&model, &camp.embedder, &acfg, &camp.cases, tag, Some(&dir.join("eval").join("images")))?;
            write_reports_jsonl(&dir.join("eval").join("reports.jsonl"), &reports)?;
            rows.push(CampaignRow::aggregate(seed, alpha, lambda_on, &reports));
        }
    }
    write_campaign_csv(&out.join(ABLATION_CSV), &rows, &hash)?;
    write_campaign_csv(&out.join(BASELINE_CSV), &baseline, &hash)?;
    write_time(&out.join(ABLATION_TIME), &hash, start)?;
    Ok(AblationResult { rows, baseline, training })
}

/// Evaluates the `lambda_on` model of every seed under `models` over the
/// configured alpha grid and writes `alpha_sweep.csv` to `out`.
pub fn sweep_alpha(cfg: &ExperimentConfig, models: &Path, out: &Path) -> Result<Vec<CampaignRow>> {
    let start = Instant::now();
    let hash = cfg.hash();
    let camp = Campaign::new(cfg, out)?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let path = arm_dir(models, seed, true).join(CHECKPOINT_FILE);
        let (model, ck) = load_model(cfg, &path)?;
        if ck.config_hash != hash {
            return Err(HarnessError::checkpoint(&path, format!("trained under config {}, sweeping config {hash}", ck.config_hash)));
        }
        if ck.step != cfg.train.steps {
            return Err(HarnessError::checkpoint(&path, format!("training stopped at step {} of {}", ck.step, cfg.train.steps)));
        }
        for &alpha in &cfg.eval.alphas {
            let dir = out.join("sweep").join(format!("seed_{seed}")).join(format!("alpha_{}", alpha_label(alpha)));
            let tag = RunTag { config_hash: &hash, seed, alpha, lambda: cfg.train.lambda };
            let reports = evaluate(&model, &camp.embedder, cfg, &camp.cases, tag, Some(&dir.join("images")))?;
            write_reports_jsonl(&dir.join("reports.jsonl"), &reports)?;
            rows.push(CampaignRow::aggregate(seed, alpha, true, &reports));
        }
    }
    write_campaign_csv(&out.join(SWEEP_CSV), &rows, &hash)?;
    write_time(&out.join(SWEEP_TIME), &hash, start)?;
    Ok(rows)
}
