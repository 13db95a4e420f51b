//! Ancestral sampling with classifier-free guidance and delayed subject
//! conditioning.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::AttentionRecord;
use crate::encoders::SubjectRef;
use crate::error::{CoreError, Result};
use crate::model::ComposerModel;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::{LatentGrid, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Guidance scale; 1 uses the conditional prediction alone.
    pub guidance: f64,
    /// Fraction of the trajectory (the final, low-noise part) that uses
    /// subject-augmented conditioning.
    pub alpha: f64,
    /// Clamp the implied clean image to `[-1, 1]` before the posterior step.
    pub clip_x0: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { guidance: 3.0, alpha: 0.7, clip_x0: true }
    }
}

/// Augmented conditioning is used at step `t` unless `t > alpha * T`.
pub fn uses_augmented(t: usize, alpha: f64, steps: usize) -> bool {
    !(t as f64 > alpha * steps as f64)
}

#[derive(Debug, Clone)]
pub struct StepTrace<S> {
    pub t: usize,
    pub augmented: bool,
    /// Conditional-branch attention maps (empty unless recording).
    pub attention: Vec<AttentionRecord<S>>,
}

#[derive(Debug, Clone)]
pub struct SampleOutput<S> {
    /// Generated image with values in `[0, 1]`.
    pub image: LatentGrid<S>,
    pub trace: Vec<StepTrace<S>>,
}

fn normal_grid<S: Scalar>(like: &LatentGrid<S>, rng: &mut ChaCha8Rng) -> LatentGrid<S> {
    let data = (0..like.data.len())
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            S::c(v)
        })
        .collect();
    LatentGrid { shape: like.shape, data }
}

/// Generates one image. All noise comes from `seed`, drawn in the same order
/// for every `alpha` and guidance, so runs differing only in those settings
/// share their noise.
pub fn sample<S: Scalar>(
    model: &ComposerModel<S>,
    schedule: &NoiseSchedule,
    tokens: &[usize],
    subjects: &[SubjectRef<S>],
    cfg: &SamplerConfig,
    seed: u64,
    record_attention: bool,
) -> Result<SampleOutput<S>> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(CoreError::Config(format!("alpha {} outside [0, 1]", cfg.alpha)));
    }
    if !cfg.guidance.is_finite() || cfg.guidance < 0.0 {
        return Err(CoreError::Config(format!("guidance scale {} must be finite and non-negative", cfg.guidance)));
    }
    let steps = schedule.steps();
    let text = model.encode_text(tokens)?.rows;
    let null = model.null_conditioning();
    let mut augmented: Option<Mat<S>> = None;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zero = LatentGrid::zeros(model.cfg.image);
    let mut z = normal_grid(&zero, &mut rng);
    let mut trace = Vec::with_capacity(steps);
    let one = S::one();
    for t in (1..=steps).rev() {
        let aug = uses_augmented(t, cfg.alpha, steps);
        let cond = if aug {
            if augmented.is_none() {
                augmented = Some(if subjects.is_empty() { text.clone() } else { model.augmented(tokens, subjects)?.rows });
            }
            augmented.as_ref().unwrap()
        } else {
            &text
        };
        let (out_c, _) = model.denoise(&z, t, cond)?;
        let eps = if cfg.guidance == 1.0 {
            out_c.eps_hat.clone()
        } else {
            let (out_u, _) = model.denoise(&z, t, &null)?;
            let g = S::c(cfg.guidance);
            let data = out_u.eps_hat.data.iter().zip(&out_c.eps_hat.data).map(|(&u, &c)| u + g * (c - u)).collect();
            LatentGrid { shape: z.shape, data }
        };
        trace.push(StepTrace { t, augmented: aug, attention: if record_attention { out_c.attention } else { Vec::new() } });

        let ab = schedule.alpha_bar(t);
        let ab_prev = if t > 1 { schedule.alpha_bar(t - 1) } else { 1.0 };
        let beta = schedule.beta(t);
        let c1 = S::c(ab_prev.sqrt() * beta / (1.0 - ab));
        let c2 = S::c(schedule.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab));
        let (sa, sb) = (S::c(ab.sqrt()), S::c((1.0 - ab).sqrt()));
        let noise = if t > 1 { Some(normal_grid(&z, &mut rng)) } else { None };
        let sigma = S::c((beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt());
        for i in 0..z.data.len() {
            let mut x0 = (z.data[i] - sb * eps.data[i]) / sa;
            if cfg.clip_x0 {
                x0 = x0.max(-one).min(one);
            }
            let mut v = c1 * x0 + c2 * z.data[i];
            if let Some(n) = &noise {
                v += sigma * n.data[i];
            }
            z.data[i] = v;
        }
        if !z.is_finite() {
            return Err(CoreError::Divergence { step: t as u64, detail: "sampler produced non-finite values".into() });
        }
    }
    let half = S::c(0.5);
    let image = z.map(|v| ((v + one) * half).max(S::zero()).min(one));
    Ok(SampleOutput { image, trace })
}
