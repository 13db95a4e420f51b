//! Identity embedder: a small convolutional encoder trained with a
//! cosine-softmax objective over the training identities, then frozen.

use glyphcomp_core::encoders::SubjectEncoder;
use glyphcomp_core::params::{Init, ParamId};
use glyphcomp_core::{Adam, AdamConfig, Grads, LatentGrid, ParamStore, Scalar, SegmentationMask};
use glyphcomp_world::render::{draw_glyph, Canvas};
use glyphcomp_world::{BBox, GlyphIdentity, Hue, Style, CROP_SIZE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detect::masked_crop;
use crate::error::{EvalError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub widths: [usize; 2],
    pub dim: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Logit scale of the cosine softmax.
    pub scale: f64,
    /// Standard deviation of the pixel noise added to rendered glyphs.
    pub pixel_noise: f64,
    /// Per-channel gain jitter applied to rendered glyphs.
    pub gain_jitter: f64,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            widths: [16, 32],
            dim: 32,
            steps: 2000,
            batch: 32,
            lr: 2e-3,
            scale: 10.0,
            pixel_noise: 0.04,
            gain_jitter: 0.15,
            seed: 0,
        }
    }
}

/// Frozen embedder weights plus the layer layout needed to run them.
#[derive(Debug, Clone)]
pub struct IdentityEmbedder {
    pub encoder: SubjectEncoder,
    pub params: ParamStore<f32>,
}

fn layout<S: Scalar>(cfg: &EmbedderConfig, classes: usize, rng: &mut ChaCha8Rng) -> (SubjectEncoder, ParamStore<S>, ParamId) {
    let mut store = ParamStore::new();
    let encoder = SubjectEncoder::new(&mut store, rng, "embed", CROP_SIZE, cfg.widths, cfg.dim);
    let proxies = store.add("embed.proxies", &[classes.max(1), cfg.dim], Init::Normal(1.0), true, rng);
    (encoder, store, proxies)
}

fn normalize(v: &[f64]) -> (Vec<f64>, f64) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (v.iter().map(|x| x / n).collect(), n)
}

/// Gradient of `u = v / |v|` mapped back to `v`.
fn normalize_backward(u: &[f64], n: f64, du: &[f64]) -> Vec<f64> {
    let dot: f64 = u.iter().zip(du).map(|(a, b)| a * b).sum();
    u.iter().zip(du).map(|(a, g)| (g - a * dot) / n).collect()
}

/// Mean cosine-softmax cross-entropy over `batch` and its gradient.
pub fn cosine_softmax_loss<S: Scalar>(
    encoder: &SubjectEncoder,
    params: &ParamStore<S>,
    proxies: ParamId,
    batch: &[(LatentGrid<S>, usize)],
    scale: f64,
) -> Result<(f64, Grads<S>)> {
    let mut grads = Grads::zeros_like(params);
    let dim = encoder.out_dim;
    let w = params.get(proxies);
    let classes = w.len() / dim;
    let rows: Vec<(Vec<f64>, f64)> = (0..classes).map(|k| normalize(&w[k * dim..(k + 1) * dim].iter().map(|v| v.f64()).collect::<Vec<_>>())).collect();
    let mut dw = vec![vec![0.0; dim]; classes];
    let mut loss = 0.0;
    let inv_b = 1.0 / batch.len() as f64;
    for (crop, label) in batch {
        let (f, cache) = encoder.forward(params, crop)?;
        let (u, n) = normalize(&f.iter().map(|v| v.f64()).collect::<Vec<_>>());
        if n == 0.0 {
            return Err(EvalError::Similarity("zero embedding during training".into()));
        }
        let z: Vec<f64> = rows.iter().map(|(wk, _)| scale * wk.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()).collect();
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = zmax + z.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
        loss += (lse - z[*label]) * inv_b;
        let mut du = vec![0.0; dim];
        for k in 0..classes {
            let dz = ((z[k] - lse).exp() - (k == *label) as u8 as f64) * inv_b;
            for j in 0..dim {
                du[j] += scale * dz * rows[k].0[j];
                dw[k][j] += scale * dz * u[j];
            }
        }
        let df: Vec<S> = normalize_backward(&u, n, &du).into_iter().map(S::c).collect();
        encoder.backward(params, &mut grads, &cache, &df);
    }
    let gw = grads.get_mut(proxies);
    for k in 0..classes {
        for (j, v) in normalize_backward(&rows[k].0, rows[k].1, &dw[k]).into_iter().enumerate() {
            gw[k * dim + j] += S::c(v);
        }
    }
    Ok((loss, grads))
}

/// Renders `id` alone in `style` on a `field` canvas and returns its
/// normalized crop, with optional color jitter and pixel noise on the glyph.
pub fn render_identity_crop(id: &GlyphIdentity, style: Style, field: Hue, gain_jitter: f64, pixel_noise: f64, rng: &mut impl Rng) -> LatentGrid<f32> {
    let size = 24;
    let mut canvas = Canvas::field(size, size, field, 0.02, rng);
    let c = size / 2 + rng.random_range(0..2);
    draw_glyph(&mut canvas, id, style, c, c, 1);
    let gains: [f64; 3] = std::array::from_fn(|_| 1.0 + rng.random_range(-gain_jitter..=gain_jitter));
    let noise = Normal::new(0.0, pixel_noise.max(0.0)).expect("finite noise level");
    let mut grid = glyphcomp_world::scene::canvas_to_grid(&canvas);
    let mask = SegmentationMask::from_fn(size, size, |y, x| canvas.labels[y * size + x] == 1);
    for y in 0..size {
        for x in 0..size {
            if mask.get(y, x) {
                for (ch, g) in gains.iter().enumerate() {
                    let v = grid.get(y, x, ch) as f64 * g + noise.sample(rng);
                    grid.set(y, x, ch, v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    let bbox = BBox::of(size, size, |y, x| mask.get(y, x)).expect("glyph paints pixels");
    masked_crop(&grid, &mask, &bbox)
}

fn random_view(id: &GlyphIdentity, cfg: &EmbedderConfig, rng: &mut impl Rng) -> LatentGrid<f32> {
    let style = Style::ALL[rng.random_range(0..Style::ALL.len())];
    let field = Hue::ALL[rng.random_range(0..Hue::ALL.len())];
    render_identity_crop(id, style, field, cfg.gain_jitter, cfg.pixel_noise, rng)
}

impl IdentityEmbedder {
    /// Trains on `identities` and returns the frozen embedder together with
    /// the per-step losses.
    pub fn train(identities: &[GlyphIdentity], cfg: &EmbedderConfig) -> Result<(IdentityEmbedder, Vec<f64>)> {
        if identities.is_empty() || cfg.batch == 0 {
            return Err(EvalError::Similarity("embedder needs identities and a positive batch".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (encoder, mut params, proxies) = layout::<f32>(cfg, identities.len(), &mut rng);
        let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &params);
        let mut losses = Vec::with_capacity(cfg.steps);
        for _ in 0..cfg.steps {
            let batch: Vec<(LatentGrid<f32>, usize)> = (0..cfg.batch)
                .map(|_| {
                    let k = rng.random_range(0..identities.len());
                    (random_view(&identities[k], cfg, &mut rng), k)
                })
                .collect();
            let (loss, grads) = cosine_softmax_loss(&encoder, &params, proxies, &batch, cfg.scale)?;
            opt.update(&mut params, &grads);
            losses.push(loss);
        }
        for t in params.tensors_mut() {
            t.trainable = false;
        }
        Ok((IdentityEmbedder { encoder, params }, losses))
    }

    /// Rebuilds an embedder around stored weights, checking names and shapes.
    pub fn from_params(cfg: &EmbedderConfig, params: ParamStore<f32>) -> Result<IdentityEmbedder> {
        let classes = params.find("embed.proxies").map(|id| params.tensor(id).shape[0]).unwrap_or(0);
        let (encoder, expected, _) = layout::<f32>(cfg, classes, &mut ChaCha8Rng::seed_from_u64(0));
        let same = expected.len() == params.len()
            && expected.tensors().iter().zip(params.tensors()).all(|(a, b)| a.name == b.name && a.shape == b.shape);
        if !same {
            return Err(EvalError::Shape("embedder weights do not match the configured layout".into()));
        }
        Ok(IdentityEmbedder { encoder, params })
    }

    pub fn embed(&self, crop: &LatentGrid<f32>) -> Result<Vec<f64>> {
        let (f, _) = self.encoder.forward(&self.params, crop)?;
        Ok(f.into_iter().map(|v| v as f64).collect())
    }

    pub fn similarity(&self, a: &LatentGrid<f32>, b: &LatentGrid<f32>) -> Result<f64> {
        cosine(&self.embed(a)?, &self.embed(b)?)
    }
}

/// Cosine similarity; exactly 1 for identical vectors and symmetric.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(EvalError::Shape(format!("embeddings of length {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 || !(na.is_finite() && nb.is_finite()) {
        return Err(EvalError::Similarity("zero-norm embedding".into()));
    }
    // sqrt(na * na) == sqrt(na)^2 rounds back to na, so a == b gives exactly 1.
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

pub fn identity_similarity(embedder: &IdentityEmbedder, a: &LatentGrid<f32>, b: &LatentGrid<f32>) -> Result<f64> {
    embedder.similarity(a, b)
}

/// Mean same-identity similarity minus mean cross-identity similarity over
/// `views` random renderings of each identity.
pub fn separation_margin(embedder: &IdentityEmbedder, identities: &[GlyphIdentity], views: usize, seed: u64) -> Result<(f64, f64)> {
    let cfg = EmbedderConfig { pixel_noise: 0.02, gain_jitter: 0.05, ..EmbedderConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut emb = Vec::new();
    for (k, id) in identities.iter().enumerate() {
        for _ in 0..views {
            emb.push((k, embedder.embed(&random_view(id, &cfg, &mut rng))?));
        }
    }
    let (mut same, mut ns, mut cross, mut nc) = (0.0, 0.0f64, 0.0, 0.0f64);
    for i in 0..emb.len() {
        for j in i + 1..emb.len() {
            let s = cosine(&emb[i].1, &emb[j].1)?;
            if emb[i].0 == emb[j].0 {
                same += s;
                ns += 1.0;
            } else {
                cross += s;
                nc += 1.0;
            }
        }
    }
    Ok((same / ns.max(1.0), cross / nc.max(1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use glyphcomp_world::{generate_world, Split, WorldConfig};

    #[test]
    fn cosine_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a: Vec<f64> = (0..32).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..32).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert_eq!(cosine(&a, &a).unwrap(), 1.0);
            assert_eq!(cosine(&a, &b).unwrap(), cosine(&b, &a).unwrap());
        }
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(EvalError::Similarity(_))));
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let world = generate_world(WorldConfig::default(), 0).unwrap();
        let ids = &world.pool(Split::Train)[..3];
        let cfg = EmbedderConfig { widths: [2, 3], dim: 4, ..EmbedderConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (encoder, mut params, proxies) = layout::<f64>(&cfg, ids.len(), &mut rng);
        let batch: Vec<(LatentGrid<f64>, usize)> = (0..3).map(|k| (random_view(&ids[k], &cfg, &mut rng).cast(), k)).collect();
        let (_, grads) = cosine_softmax_loss(&encoder, &params, proxies, &batch, 4.0).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for ti in 0..params.len() {
            for j in 0..params.tensors()[ti].data.len() {
                let orig = params.tensors()[ti].data[j];
                params.tensors_mut()[ti].data[j] = orig + h;
                let lp = cosine_softmax_loss(&encoder, &params, proxies, &batch, 4.0).unwrap().0;
                params.tensors_mut()[ti].data[j] = orig - h;
                let lm = cosine_softmax_loss(&encoder, &params, proxies, &batch, 4.0).unwrap().0;
                params.tensors_mut()[ti].data[j] = orig;
                let num = (lp - lm) / (2.0 * h);
                let ana = grads.by_index(ti)[j];
                worst = worst.max((ana - num).abs() / ana.abs().max(num.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn weights_round_trip_through_layout() {
        let world = generate_world(WorldConfig::default(), 0).unwrap();
        let cfg = EmbedderConfig { steps: 2, batch: 2, ..EmbedderConfig::default() };
        let (e, losses) = IdentityEmbedder::train(&world.pool(Split::Train)[..4], &cfg).unwrap();
        assert_eq!(losses.len(), 2);
        assert!(e.params.tensors().iter().all(|t| !t.trainable));
        let back = IdentityEmbedder::from_params(&cfg, e.params.clone()).unwrap();
        let crop = render_identity_crop(&world.identities[0], Style::Plain, Hue::Red, 0.0, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(back.embed(&crop).unwrap(), e.embed(&crop).unwrap());
        let other = EmbedderConfig { dim: 8, ..cfg };
        assert!(IdentityEmbedder::from_params(&other, e.params).is_err());
    }
}
