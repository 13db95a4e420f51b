use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use glyphcomp::evaluation::{cached_embedder, evaluate_case, render_reference, EvalCase, RunTag};
use glyphcomp::experiments::{ablate_loc, sweep_alpha, EMBEDDER_FILE};
use glyphcomp::training::{load_model, train};
use glyphcomp::{report, ExperimentConfig, HarnessError, Result};
use glyphcomp_eval::report::write_reports_jsonl;
use glyphcomp_world::io::write_split;
use glyphcomp_world::vocab::tokenize;
use glyphcomp_world::{chunk_phrases, generate_world, Split};

/// Like `println!` but a closed stdout (e.g. piped into `head`) is not fatal.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "glyphcomp", version, about = "Subject-conditioned glyph diffusion experiments")]
struct Cli {
    /// JSON experiment configuration (defaults when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seeds with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write PNG scenes, masks and manifests for both splits.
    GenData {
        #[arg(long, default_value_t = 1000)]
        train_count: u64,
        #[arg(long, default_value_t = 200)]
        heldout_count: u64,
    },
    /// Train one model (first configured seed unless --seed is given).
    Train,
    /// Train with and without the localization loss for every seed and compare.
    AblateLoc,
    /// Evaluate trained models over the alpha grid.
    SweepAlpha {
        /// Directory holding `seed_<s>/lambda_on/checkpoint.bin` (defaults to --out).
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Generate images for a prompt with held-out reference identities.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Identity ids, one per noun phrase in order.
        #[arg(long, value_delimiter = ',')]
        identities: Vec<u32>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Summarize the campaign CSVs in --out.
    Report,
    /// Print the effective configuration as JSON.
    PrintConfig,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    cfg.out_dir = Some(cli.out.display().to_string());
    Ok(cfg)
}

fn run_sample(cfg: &ExperimentConfig, out: &Path, checkpoint: &Path, prompt: &str, ids: &[u32], alpha: Option<f64>, count: usize) -> Result<()> {
    let world = generate_world(cfg.world.clone(), cfg.world_seed)?;
    let tokens = tokenize(prompt).ok_or_else(|| HarnessError::Config(format!("prompt has words outside the vocabulary: {prompt}")))?;
    let chunked = chunk_phrases(&tokens).map_err(|e| HarnessError::Config(e.to_string()))?;
    if ids.len() != chunked.spans.len() {
        return Err(HarnessError::Config(format!("{} identities given for {} noun phrases", ids.len(), chunked.spans.len())));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= world.identities.len()) {
        return Err(HarnessError::Config(format!("identity {bad} does not exist ({} identities)", world.identities.len())));
    }
    let alpha = alpha.unwrap_or(cfg.sampler.alpha);
    if !(0.0..=1.0).contains(&alpha) {
        return Err(HarnessError::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let (model, _) = load_model(cfg, checkpoint)?;
    let embedder = cached_embedder(&world, cfg, &out.join(EMBEDDER_FILE))?;
    let references = ids.iter().map(|&i| render_reference(&world, world.identity(i))).collect::<Result<Vec<_>>>()?;
    let token_indices = chunked.spans.iter().map(|s| s.head_index()).collect();
    let hash = cfg.hash();
    let seed = cfg.seeds[0];
    let mut reports = Vec::new();
    for k in 0..count {
        let case = EvalCase { index: k, tokens: chunked.tokens.clone(), references: references.clone(), token_indices: Vec::clone(&token_indices) };
        let tag = RunTag { config_hash: &hash, seed, alpha, lambda: cfg.train.lambda };
        let (r, _) = evaluate_case(&model, &embedder, cfg, &case, tag, Some((out, format!("sample_{k:03}.png"))))?;
        say!("{}: identity {:.3}, prompt consistency {:.3}", r.image, r.identity_preservation, r.prompt_consistency);
        reports.push(r);
    }
    write_reports_jsonl(&out.join("samples.jsonl"), &reports)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenData { train_count, heldout_count } => {
            let world = generate_world(cfg.world.clone(), cfg.world_seed)?;
            let hash = cfg.hash();
            write_split(out, &world, Split::Train, *train_count, &hash)?;
            write_split(out, &world, Split::Heldout, *heldout_count, &hash)?;
            say!("wrote {train_count} train and {heldout_count} held-out scenes to {}", out.display());
        }
        Command::Train => {
            let s = train(&cfg, cfg.seeds[0], out)?;
            say!(
                "trained {} steps (seed {}): validation noise loss {:.4} -> {:.4}",
                s.steps, s.seed, s.val_noise_initial, s.val_noise_final
            );
        }
        Command::AblateLoc => {
            let r = ablate_loc(&cfg, out)?;
            for row in &r.rows {
                say!("seed {} {}: identity {:.4}, iou {:?}", row.seed, glyphcomp::experiments::arm_name(row.lambda_on), row.identity_preservation, row.attention_iou);
            }
        }
        Command::SweepAlpha { models } => {
            let rows = sweep_alpha(&cfg, models.as_deref().unwrap_or(out), out)?;
            for row in &rows {
                say!("seed {} alpha {:.2}: identity {:.4}, prompt {:.4}", row.seed, row.alpha, row.identity_preservation, row.prompt_consistency);
            }
        }
        Command::Sample { checkpoint, prompt, identities, alpha, count } => {
            run_sample(&cfg, out, checkpoint, prompt, identities, *alpha, *count)?;
        }
        Command::PrintConfig => say!("{}", ExperimentConfig { out_dir: None, ..cfg }.to_json()),
        Command::Report => match report::report(out)? {
            Some(text) => print!("{text}"),
            None => log::warn!("no campaign CSVs found in {}", out.display()),
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
