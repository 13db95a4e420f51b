//! Held-out evaluation prompts and per-image metrics.

use std::path::Path;

use glyphcomp_core::{sample, ComposerModel, LatentGrid, SamplerConfig, SegmentationMask, SubjectRef};
use glyphcomp_eval::{
    attention_iou, detect_subjects, masked_crop, multi_subject_identity_score, prompt_consistency, IdentityEmbedder, MetricsReport,
};
use glyphcomp_world::grammar::compose_caption;
use glyphcomp_world::io::{grid_to_png, write_file};
use glyphcomp_world::sample::{crop_window, noised_crop};
use glyphcomp_world::scene::{canvas_to_grid, derived_rng, render_layout};
use glyphcomp_world::vocab::detokenize;
use glyphcomp_world::{chunk_phrases, GlyphIdentity, Hue, Style, World, CROP_SIZE};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

const PAIR_STREAM: u64 = 0xe7a1;
const REF_STREAM: u64 = 0xe7a2;
const SAMPLE_STREAM: u64 = 0xe7a3;

/// Styles cycled over the prompts of one pair.
pub const PROMPT_STYLES: [Style; 5] = [Style::Striped, Style::Hollow, Style::Plain, Style::Striped, Style::Hollow];

/// A subject as shown to the model and to the evaluator.
#[derive(Debug, Clone)]
pub struct Reference {
    pub identity: u32,
    /// Background-noised crop for conditioning.
    pub model_crop: LatentGrid<f32>,
    /// Normalized crop for the identity embedder.
    pub eval_crop: LatentGrid<f32>,
    pub mask: SegmentationMask,
}

/// A plain rendering of `id` alone on a field, cropped both ways.
pub fn render_reference(world: &World, id: &GlyphIdentity) -> Result<Reference> {
    let cfg = &world.config;
    let mut rng = derived_rng(world.seed, REF_STREAM, id.id as u64);
    let field = Hue::ALL[rng.random_range(0..Hue::ALL.len())];
    let layout = render_layout(cfg.height, cfg.width, &[id], field, Style::Plain, cfg.field_noise, &mut rng);
    let image = canvas_to_grid(&layout.canvas);
    let seg = &layout.segments[0];
    let w = cfg.width;
    let mask = SegmentationMask::from_fn(cfg.height, w, |y, x| layout.canvas.labels[y * w + x] == seg.id);
    let (y0, x0) = crop_window(&seg.bbox, CROP_SIZE, cfg.height, cfg.width);
    let model_crop = noised_crop(&image, &mask, y0, x0, CROP_SIZE, &mut rng)?;
    let eval_crop = masked_crop(&image, &mask, &seg.bbox);
    Ok(Reference { identity: id.id, model_crop, eval_crop, mask })
}

#[derive(Debug, Clone)]
pub struct EvalCase {
    pub index: usize,
    pub tokens: Vec<usize>,
    pub references: Vec<Reference>,
    /// Caption position of each reference's head token.
    pub token_indices: Vec<usize>,
}

impl EvalCase {
    pub fn subjects(&self) -> Vec<SubjectRef<f32>> {
        self.references
            .iter()
            .zip(&self.token_indices)
            .map(|(r, &t)| SubjectRef { crop: r.model_crop.clone(), identity: Some(r.identity), mask: r.mask.clone(), token_index: t })
            .collect()
    }

    pub fn caption(&self) -> String {
        detokenize(&self.tokens)
    }
}

/// Two-subject prompts over pairs of held-out identities. Prompt `k` of a
/// pair names the glyph colors when `k` is even, uses style
/// `PROMPT_STYLES[k % 5]` and rotates the field color.
pub fn eval_cases(world: &World, cfg: &ExperimentConfig) -> Result<Vec<EvalCase>> {
    let pool = world.pool(glyphcomp_world::Split::Heldout);
    let refs: Vec<Reference> = pool.iter().map(|id| render_reference(world, id)).collect::<Result<_>>()?;
    let mut pairs: Vec<(usize, usize)> = (0..pool.len()).flat_map(|i| (i + 1..pool.len()).map(move |j| (i, j))).collect();
    pairs.shuffle(&mut derived_rng(cfg.world_seed, PAIR_STREAM, 0));
    pairs.truncate(cfg.eval.max_pairs);
    let mut cases = Vec::new();
    for (p, &(i, j)) in pairs.iter().enumerate() {
        for k in 0..cfg.eval.prompts_per_pair {
            let colors: Vec<Option<Hue>> = [i, j].iter().map(|&n| (k % 2 == 0).then(|| pool[n].hue_name())).collect();
            let field = Hue::ALL[(p + k) % Hue::ALL.len()];
            let tokens = compose_caption(&colors, false, Some(field), PROMPT_STYLES[k % PROMPT_STYLES.len()]);
            let spans = chunk_phrases(&tokens)?.spans;
            cases.push(EvalCase {
                index: cases.len(),
                tokens,
                references: vec![refs[i].clone(), refs[j].clone()],
                token_indices: spans.iter().map(|s| s.head_index()).collect(),
            });
        }
    }
    Ok(cases)
}

/// Trains the frozen identity embedder used by every evaluation.
pub fn train_embedder(world: &World, cfg: &ExperimentConfig) -> Result<IdentityEmbedder> {
    Ok(IdentityEmbedder::train(&world.identities, &cfg.eval.embedder)?.0)
}

/// Loads `path` when it holds an embedder for this config, otherwise
/// trains one and stores it there.
pub fn cached_embedder(world: &World, cfg: &ExperimentConfig, path: &Path) -> Result<IdentityEmbedder> {
    let hash = embedder_hash(cfg);
    if path.exists() {
        let ck = Checkpoint::load(path)?;
        if ck.config_hash == hash {
            return Ok(IdentityEmbedder::from_params(&cfg.eval.embedder, ck.params())?);
        }
        log::warn!("{} was trained for another configuration; retraining", path.display());
    }
    let e = train_embedder(world, cfg)?;
    Checkpoint::from_params(&e.params, &hash, cfg.eval.embedder.steps as u64).save(path)?;
    Ok(e)
}

/// The embedder depends only on the world and its own settings.
fn embedder_hash(cfg: &ExperimentConfig) -> String {
    use sha2::{Digest, Sha256};
    let key = serde_json::to_vec(&(&cfg.world, cfg.world_seed, &cfg.eval.embedder)).expect("serializes");
    Sha256::digest(&key).iter().map(|b| format!("{b:02x}")).collect()
}

/// Sampling seed of a case; shared by every alpha and both loss arms.
pub fn case_seed(seed: u64, case: usize) -> u64 {
    derived_rng(seed, SAMPLE_STREAM, case as u64).random()
}

#[derive(Debug, Clone, Copy)]
pub struct RunTag<'a> {
    pub config_hash: &'a str,
    pub seed: u64,
    pub alpha: f64,
    pub lambda: f64,
}

/// Samples one image and scores it.
pub fn evaluate_case(
    model: &ComposerModel<f32>,
    embedder: &IdentityEmbedder,
    cfg: &ExperimentConfig,
    case: &EvalCase,
    tag: RunTag,
    image_path: Option<(&Path, String)>,
) -> Result<(MetricsReport, LatentGrid<f32>)> {
    let schedule = cfg.schedule()?;
    let sampler = SamplerConfig { alpha: tag.alpha, ..cfg.sampler };
    let out = sample(model, &schedule, &case.tokens, &case.subjects(), &sampler, case_seed(tag.seed, case.index), true)?;
    let image = out.image;
    let detections = detect_subjects(&image, &cfg.eval.detector);
    let refs: Vec<LatentGrid<f32>> = case.references.iter().map(|r| r.eval_crop.clone()).collect();
    let id = multi_subject_identity_score(embedder, &refs, &detections)?;
    let pc = prompt_consistency(&image, &case.tokens, &cfg.eval.detector)?;

    let (mut sum, mut n) = (0.0, 0usize);
    for step in out.trace.iter().filter(|s| s.augmented) {
        for rec in step.attention.iter().filter(|r| r.is_inner_block) {
            for (r, &tok) in id.assignment.iter().zip(&case.token_indices) {
                if let Some(d) = r {
                    if let Some(v) = attention_iou(rec, tok, &detections[*d].mask, cfg.eval.iou_threshold)? {
                        sum += v;
                        n += 1;
                    }
                }
            }
        }
    }
    let iou = (n > 0).then(|| sum / n as f64);

    let name = match image_path {
        Some((dir, name)) => {
            let bytes = grid_to_png(&image, &[("config_hash", tag.config_hash), ("caption", &case.caption())]);
            write_file(&dir.join(&name), &bytes).map_err(HarnessError::from)?;
            name
        }
        None => String::new(),
    };
    let report = MetricsReport::new(tag.config_hash, tag.seed, tag.alpha, tag.lambda, name, case.caption(), id.per_subject, pc.score, iou);
    Ok((report, image))
}

/// Scores every case; images go to `image_dir` when given.
pub fn evaluate(
    model: &ComposerModel<f32>,
    embedder: &IdentityEmbedder,
    cfg: &ExperimentConfig,
    cases: &[EvalCase],
    tag: RunTag,
    image_dir: Option<&Path>,
) -> Result<Vec<MetricsReport>> {
    cases
        .iter()
        .map(|c| {
            let target = image_dir.map(|d| (d, format!("{:04}.png", c.index)));
            evaluate_case(model, embedder, cfg, c, tag, target).map(|r| r.0)
        })
        .collect()
}
