//! Text encoder, subject encoder and the subject-augmented conditioning.
//!
//! The text encoder is frozen after random initialization. The subject
//! encoder and the fusion MLP are trained together with the denoiser.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::localization::SegmentationMask;
use crate::nn::{
    attention_scores, avg_pool2, avg_pool2_backward, concat_cols, silu_backward, silu_mat, sinusoidal, split_cols,
    Conv2d, ConvCache, LayerNorm, LayerNormCache, Linear,
};
use crate::params::{Grads, Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{LatentGrid, Mat};

/// `n x d` sequence of conditioning embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningMatrix<S> {
    pub rows: Mat<S>,
}

impl<S: Scalar> ConditioningMatrix<S> {
    pub fn len(&self) -> usize {
        self.rows.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols
    }
}

/// Conditioning with subject rows replaced by fused embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedConditioning<S> {
    pub rows: Mat<S>,
    pub augmented_indices: BTreeSet<usize>,
}

/// One reference subject bound to a prompt token.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRef<S> {
    /// Background-noised crop, values in `[0, 1]`.
    pub crop: LatentGrid<S>,
    /// Identity label; only known for training data.
    pub identity: Option<u32>,
    /// Full-resolution segmentation mask of the subject in the target image.
    pub mask: SegmentationMask,
    pub token_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    Full,
    TextOnly,
    Unconditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeProbabilities {
    pub full: f64,
    pub text_only: f64,
    pub unconditional: f64,
}

impl Default for ModeProbabilities {
    fn default() -> Self {
        ModeProbabilities { full: 0.8, text_only: 0.1, unconditional: 0.1 }
    }
}

impl ModeProbabilities {
    pub fn validate(&self) -> Result<()> {
        let ps = [self.full, self.text_only, self.unconditional];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(CoreError::Config(format!("mode probabilities out of [0,1]: {ps:?}")));
        }
        let sum: f64 = ps.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CoreError::Config(format!("mode probabilities sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Categorical draw of the conditioning regime for one training sample.
pub fn sample_condition_mode(probs: &ModeProbabilities, rng: &mut impl Rng) -> Result<ConditionMode> {
    probs.validate()?;
    let u: f64 = rng.random();
    Ok(if u < probs.full {
        ConditionMode::Full
    } else if u < probs.full + probs.text_only {
        ConditionMode::TextOnly
    } else {
        ConditionMode::Unconditional
    })
}

/// Drops each subject independently with probability `p`; survivors keep
/// their order.
pub fn apply_subject_dropout<S: Clone>(subjects: Vec<SubjectRef<S>>, p: f64, rng: &mut impl Rng) -> Vec<SubjectRef<S>> {
    subjects
        .into_iter()
        .filter(|_| {
            let u: f64 = rng.random();
            u >= p
        })
        .collect()
}

/// Frozen token encoder: embedding + sinusoidal positions + one
/// self-attention block + output norm.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub vocab: usize,
    pub dim: usize,
    pub embed: ParamId,
    pub norm: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub norm_out: LayerNorm,
}

impl TextEncoder {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut impl Rng, vocab: usize, dim: usize) -> Self {
        TextEncoder {
            vocab,
            dim,
            embed: store.add("text.embed", &[vocab, dim], Init::Normal(1.0), false, rng),
            norm: LayerNorm::new(store, rng, "text.norm", dim, false),
            wq: Linear::new(store, rng, "text.q", dim, dim, false, false, 1.0),
            wk: Linear::new(store, rng, "text.k", dim, dim, false, false, 1.0),
            wv: Linear::new(store, rng, "text.v", dim, dim, false, false, 1.0),
            wo: Linear::new(store, rng, "text.out", dim, dim, true, false, 1.0),
            norm_out: LayerNorm::new(store, rng, "text.norm_out", dim, false),
        }
    }

    pub fn encode<S: Scalar>(&self, p: &ParamStore<S>, tokens: &[usize]) -> Result<ConditioningMatrix<S>> {
        if tokens.is_empty() {
            return Err(CoreError::Shape("empty token sequence".into()));
        }
        let table = p.get(self.embed);
        let mut h = Mat::zeros(tokens.len(), self.dim);
        for (i, &tok) in tokens.iter().enumerate() {
            if tok >= self.vocab {
                return Err(CoreError::Vocabulary { id: tok, vocab: self.vocab });
            }
            let pos: Vec<S> = sinusoidal(i as f64, self.dim);
            let row = h.row_mut(i);
            for ((o, &e), &pe) in row.iter_mut().zip(&table[tok * self.dim..(tok + 1) * self.dim]).zip(&pos) {
                *o = e + pe;
            }
        }
        let (hn, _) = self.norm.forward(p, &h);
        let q = self.wq.forward(p, &hn);
        let k = self.wk.forward(p, &hn);
        let v = self.wv.forward(p, &hn);
        let a = attention_scores(&q, &k).matmul(&v);
        h.add_assign(&self.wo.forward(p, &a));
        let (out, _) = self.norm_out.forward(p, &h);
        Ok(ConditioningMatrix { rows: out })
    }
}

/// Small convolutional encoder for square subject crops.
#[derive(Debug, Clone)]
pub struct SubjectEncoder {
    pub size: usize,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub proj: Linear,
    pub out_dim: usize,
}

#[derive(Debug, Clone)]
pub struct SubjectEncoderCache<S> {
    c1: ConvCache<S>,
    pre1: Mat<S>,
    c2: ConvCache<S>,
    pre2: Mat<S>,
    flat: Mat<S>,
}

impl SubjectEncoder {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut impl Rng, name: &str, size: usize, widths: [usize; 2], out_dim: usize) -> Self {
        assert!(size % 4 == 0, "crop size must be divisible by 4");
        let flat = (size / 4) * (size / 4) * widths[1];
        SubjectEncoder {
            size,
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), 3, 3, widths[0], true, 1.0),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), 3, widths[0], widths[1], true, 1.0),
            proj: Linear::new(store, rng, &format!("{name}.proj"), flat, out_dim, true, true, 1.0),
            out_dim,
        }
    }

    fn check<S: Scalar>(&self, crop: &LatentGrid<S>) -> Result<()> {
        if crop.height() != self.size || crop.width() != self.size || crop.channels() != 3 {
            return Err(CoreError::Shape(format!(
                "subject crop is {}x{}x{}, encoder expects {}x{}x3",
                crop.height(),
                crop.width(),
                crop.channels(),
                self.size,
                self.size
            )));
        }
        Ok(())
    }

    pub fn forward<S: Scalar>(&self, p: &ParamStore<S>, crop: &LatentGrid<S>) -> Result<(Vec<S>, SubjectEncoderCache<S>)> {
        self.check(crop)?;
        let s = self.size;
        let two = S::c(2.0);
        let x = crop.to_mat();
        let x = Mat { rows: x.rows, cols: x.cols, data: x.data.iter().map(|&v| v * two - S::one()).collect() };
        let (pre1, c1) = self.conv1.forward(p, &x, s, s);
        let a1 = avg_pool2(&silu_mat(&pre1), s, s);
        let (pre2, c2) = self.conv2.forward(p, &a1, s / 2, s / 2);
        let a2 = avg_pool2(&silu_mat(&pre2), s / 2, s / 2);
        let flat = Mat::from_vec(1, a2.data.len(), a2.data);
        let out = self.proj.forward(p, &flat);
        Ok((out.data, SubjectEncoderCache { c1, pre1, c2, pre2, flat }))
    }

    pub fn backward<S: Scalar>(&self, p: &ParamStore<S>, g: &mut Grads<S>, cache: &SubjectEncoderCache<S>, dout: &[S]) {
        let s = self.size;
        let dflat = self.proj.backward(p, g, &cache.flat, &Mat::from_vec(1, dout.len(), dout.to_vec()));
        let da2 = Mat::from_vec((s / 4) * (s / 4), self.conv2.cout, dflat.data);
        let dsil2 = avg_pool2_backward(&da2, s / 2, s / 2);
        let dpre2 = silu_backward(&cache.pre2, &dsil2);
        let da1 = self.conv2.backward(p, g, &cache.c2, &dpre2);
        let dsil1 = avg_pool2_backward(&da1, s, s);
        let dpre1 = silu_backward(&cache.pre1, &dsil1);
        // The crop itself is data; its gradient is not needed.
        let _ = self.conv1.backward(p, g, &cache.c1, &dpre1);
    }
}

/// `MLP(LN(c_i || f))`: two linear layers with SiLU between, hidden width `d`.
#[derive(Debug, Clone)]
pub struct AugmentMlp {
    pub norm: LayerNorm,
    pub l1: Linear,
    pub l2: Linear,
    pub text_dim: usize,
    pub feat_dim: usize,
}

#[derive(Debug, Clone)]
pub struct AugmentMlpCache<S> {
    norm: LayerNormCache<S>,
    xn: Mat<S>,
    pre: Mat<S>,
    act: Mat<S>,
}

impl AugmentMlp {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut impl Rng, text_dim: usize, feat_dim: usize) -> Self {
        AugmentMlp {
            norm: LayerNorm::new(store, rng, "augment.norm", text_dim + feat_dim, true),
            l1: Linear::new(store, rng, "augment.fc1", text_dim + feat_dim, text_dim, true, true, 1.0),
            l2: Linear::new(store, rng, "augment.fc2", text_dim, text_dim, true, true, 1.0),
            text_dim,
            feat_dim,
        }
    }

    pub fn forward<S: Scalar>(&self, p: &ParamStore<S>, text_row: &[S], feature: &[S]) -> (Vec<S>, AugmentMlpCache<S>) {
        let x = concat_cols(&Mat::from_vec(1, text_row.len(), text_row.to_vec()), &Mat::from_vec(1, feature.len(), feature.to_vec()));
        let (xn, norm) = self.norm.forward(p, &x);
        let pre = self.l1.forward(p, &xn);
        let act = silu_mat(&pre);
        let out = self.l2.forward(p, &act);
        (out.data, AugmentMlpCache { norm, xn, pre, act })
    }

    /// Returns `(d text row, d feature)`.
    pub fn backward<S: Scalar>(&self, p: &ParamStore<S>, g: &mut Grads<S>, cache: &AugmentMlpCache<S>, dout: &[S]) -> (Vec<S>, Vec<S>) {
        let dact = self.l2.backward(p, g, &cache.act, &Mat::from_vec(1, dout.len(), dout.to_vec()));
        let dpre = silu_backward(&cache.pre, &dact);
        let dxn = self.l1.backward(p, g, &cache.xn, &dpre);
        let dx = self.norm.backward(p, g, &cache.norm, &dxn);
        let (dt, df) = split_cols(&dx, self.text_dim);
        (dt.data, df.data)
    }
}

/// Caches needed to backpropagate through [`augment_conditioning`].
#[derive(Debug, Clone)]
pub struct AugmentCache<S> {
    pub entries: Vec<(usize, AugmentMlpCache<S>)>,
}

/// Replaces row `i_j` of `c` by `MLP(c_{i_j} || features[j])`; every other
/// row is copied bit-for-bit.
pub fn augment_conditioning<S: Scalar>(
    mlp: &AugmentMlp,
    p: &ParamStore<S>,
    c: &ConditioningMatrix<S>,
    token_indices: &[usize],
    features: &[Vec<S>],
) -> Result<(AugmentedConditioning<S>, AugmentCache<S>)> {
    assert_eq!(token_indices.len(), features.len(), "one feature per subject");
    let mut seen = BTreeSet::new();
    for &i in token_indices {
        if i >= c.len() {
            return Err(CoreError::Index { index: i, len: c.len() });
        }
        if !seen.insert(i) {
            return Err(CoreError::Conditioning(format!("token index {i} bound to more than one subject")));
        }
    }
    if c.dim() != mlp.text_dim {
        return Err(CoreError::Shape(format!("conditioning dim {} vs mlp {}", c.dim(), mlp.text_dim)));
    }
    let mut rows = c.rows.clone();
    let mut entries = Vec::with_capacity(token_indices.len());
    for (&i, f) in token_indices.iter().zip(features) {
        if f.len() != mlp.feat_dim {
            return Err(CoreError::Shape(format!("subject feature has {} dims, expected {}", f.len(), mlp.feat_dim)));
        }
        let (out, cache) = mlp.forward(p, c.rows.row(i), f);
        rows.row_mut(i).copy_from_slice(&out);
        entries.push((i, cache));
    }
    Ok((AugmentedConditioning { rows, augmented_indices: seen }, AugmentCache { entries }))
}
