//! Noise-prediction loss, Adam, and the per-batch training step.

use serde::{Deserialize, Serialize};

use crate::encoders::{ConditionMode, SubjectRef};
use crate::error::{CoreError, Result};
use crate::localization::{has_usable_pair, localization_loss, total_loss, LossBreakdown, SegmentationMask};
use crate::model::ComposerModel;
use crate::params::{Grads, ParamStore};
use crate::scalar::Scalar;
use crate::schedule::{forward_diffuse, NoiseSchedule};
use crate::tensor::{LatentGrid, Mat};

/// Mean squared error between predicted and true noise, optionally
/// restricted to the pixels of `region`. Returns the value and its gradient
/// with respect to `eps_hat`.
pub fn noise_loss<S: Scalar>(eps: &LatentGrid<S>, eps_hat: &LatentGrid<S>, region: Option<&SegmentationMask>) -> Result<(S, LatentGrid<S>)> {
    if eps.shape != eps_hat.shape {
        return Err(CoreError::Shape(format!("noise {:?} vs prediction {:?}", eps.shape, eps_hat.shape)));
    }
    let c = eps.channels();
    let mut grad = LatentGrid::zeros(eps.shape);
    let count = match region {
        None => eps.data.len(),
        Some(m) => {
            if m.height != eps.height() || m.width != eps.width() {
                return Err(CoreError::Shape(format!(
                    "region mask {}x{} vs grid {}x{}",
                    m.height,
                    m.width,
                    eps.height(),
                    eps.width()
                )));
            }
            if m.is_empty() {
                return Err(CoreError::Loss("subject-region loss requested with an empty region".into()));
            }
            m.count() * c
        }
    };
    let inv = S::one() / S::c(count as f64);
    let two = S::c(2.0);
    let mut sum = S::zero();
    for (i, (&e, &eh)) in eps.data.iter().zip(&eps_hat.data).enumerate() {
        if let Some(m) = region {
            if !m.bits[i / c] {
                continue;
            }
        }
        let d = eh - e;
        sum += d * d;
        grad.data[i] = two * d * inv;
    }
    Ok((sum * inv, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments exist for every tensor; frozen
/// tensors keep zero moments and are never touched.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig, params: &ParamStore<S>) -> Self {
        let zeros = |p: &ParamStore<S>| p.tensors().iter().map(|t| vec![S::zero(); t.data.len()]).collect();
        Adam { cfg, step: 0, m: zeros(params), v: zeros(params) }
    }

    pub fn update(&mut self, params: &mut ParamStore<S>, grads: &Grads<S>) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (S::c(beta1), S::c(beta2));
        let (ob1, ob2) = (S::one() - b1, S::one() - b2);
        let step_size = S::c(lr / bc1);
        let inv_bc2 = S::c(1.0 / bc2);
        let e = S::c(eps);
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            if !t.trainable {
                continue;
            }
            let g = grads.by_index(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..t.data.len() {
                m[j] = b1 * m[j] + ob1 * g[j];
                v[j] = b2 * v[j] + ob2 * g[j] * g[j];
                t.data[j] -= step_size * m[j] / ((v[j] * inv_bc2).sqrt() + e);
            }
        }
    }
}

/// Scales gradients down so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut Grads<S>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        let s = S::c(max_norm / norm);
        for i in 0..grads.len() {
            grads.by_index_mut(i).iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One prepared training example. All randomness (timestep, noise, regime,
/// subject dropout, region choice) has already been drawn.
#[derive(Debug, Clone)]
pub struct TrainingItem<S> {
    /// Clean image scaled to `[-1, 1]`.
    pub z0: LatentGrid<S>,
    pub tokens: Vec<usize>,
    pub subjects: Vec<SubjectRef<S>>,
    pub mode: ConditionMode,
    /// When set, the noise loss only covers these pixels.
    pub region: Option<SegmentationMask>,
    pub t: usize,
    pub noise: LatentGrid<S>,
}

#[derive(Debug, Clone)]
pub struct BatchResult<S> {
    pub loss: LossBreakdown,
    pub grads: Grads<S>,
    /// Samples whose localization term entered the batch mean.
    pub loc_samples: usize,
    /// Full-mode samples with subjects where no (block, subject) pair was usable.
    pub loc_warnings: usize,
}

/// Batch loss `mean(L_noise) + lambda * mean(L_loc)` and its gradient. The
/// localization mean runs over full-mode samples with subjects.
pub fn loss_and_grads<S: Scalar>(model: &ComposerModel<S>, items: &[TrainingItem<S>], schedule: &NoiseSchedule, lambda: f64) -> Result<BatchResult<S>> {
    if items.is_empty() {
        return Err(CoreError::Loss("empty batch".into()));
    }
    let inner: Vec<(usize, usize)> =
        model.denoiser.attention_layout().into_iter().filter(|l| l.2).map(|l| l.1).collect();
    let mut eligible = Vec::with_capacity(items.len());
    for it in items {
        let ok = it.mode == ConditionMode::Full && !it.subjects.is_empty() && has_usable_pair(&inner, &it.subjects)?;
        eligible.push(ok);
    }
    let loc_samples = eligible.iter().filter(|&&e| e).count();
    let loc_warnings = items
        .iter()
        .zip(&eligible)
        .filter(|(it, &e)| !e && it.mode == ConditionMode::Full && !it.subjects.is_empty())
        .count();
    let noise_scale = S::c(1.0 / items.len() as f64);
    let loc_scale = if loc_samples > 0 { S::c(lambda / loc_samples as f64) } else { S::zero() };

    let mut grads = Grads::zeros_like(&model.params);
    let (mut noise_sum, mut loc_sum) = (0.0, 0.0);
    for (it, &use_loc) in items.iter().zip(&eligible) {
        schedule.check_step(it.t)?;
        let z_t = forward_diffuse(&it.z0, it.t, &it.noise, schedule)?;
        let built = model.build_conditioning(it.mode, &it.tokens, &it.subjects)?;
        let (out, cache) = model.denoise(&z_t, it.t, &built.rows)?;
        let (nl, mut d_eps) = noise_loss(&it.noise, &out.eps_hat, it.region.as_ref())?;
        noise_sum += nl.f64();
        d_eps.data.iter_mut().for_each(|v| *v *= noise_scale);
        let mut d_attn: Vec<Option<Mat<S>>> = vec![None; out.attention.len()];
        if use_loc {
            let loc = localization_loss(&out.attention, &it.subjects)?;
            loc_sum += loc.value.f64();
            if lambda != 0.0 {
                d_attn = loc
                    .grads
                    .into_iter()
                    .map(|g| {
                        g.map(|mut g| {
                            g.data.iter_mut().for_each(|v| *v *= loc_scale);
                            g
                        })
                    })
                    .collect();
            }
        }
        let dcond = model.denoiser.backward(&model.params, &mut grads, &cache, &built.rows, &d_eps, &d_attn);
        model.backward_conditioning(&mut grads, &built, &dcond);
    }
    let noise = noise_sum / items.len() as f64;
    let loc = if loc_samples > 0 { loc_sum / loc_samples as f64 } else { 0.0 };
    Ok(BatchResult { loss: total_loss(noise, loc, lambda), grads, loc_samples, loc_warnings })
}

/// Forward, backward, optional clipping and an Adam update. Fails with a
/// divergence error when the loss or gradients stop being finite.
pub fn training_step<S: Scalar>(
    model: &mut ComposerModel<S>,
    opt: &mut Adam<S>,
    items: &[TrainingItem<S>],
    schedule: &NoiseSchedule,
    lambda: f64,
    clip: Option<f64>,
    step: u64,
) -> Result<BatchResult<S>> {
    let mut res = loss_and_grads(model, items, schedule, lambda)?;
    let finite = res.loss.total.is_finite() && res.grads.is_finite();
    if !finite {
        return Err(CoreError::Divergence {
            step,
            detail: format!("noise loss {}, loc loss {}, grad norm {}", res.loss.noise, res.loss.loc, res.grads.global_norm()),
        });
    }
    if let Some(c) = clip {
        clip_grad_norm(&mut res.grads, c);
    }
    opt.update(&mut model.params, &res.grads);
    Ok(res)
}
