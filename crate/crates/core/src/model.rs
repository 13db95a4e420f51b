//! The full conditional noise predictor: frozen text encoder, subject
//! encoder, fusion MLP, learned null conditioning and the U-Net.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserCache, DenoiserConfig, DenoiserOutput};
use crate::encoders::{
    augment_conditioning, AugmentCache, AugmentMlp, AugmentedConditioning, ConditionMode, ConditioningMatrix, SubjectEncoder,
    SubjectEncoderCache, SubjectRef, TextEncoder,
};
use crate::error::{CoreError, Result};
use crate::params::{Grads, Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{GridShape, LatentGrid, Mat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image: GridShape,
    pub patch: usize,
    pub widths: [usize; 2],
    pub time_dim: usize,
    pub temb_dim: usize,
    pub vocab_size: usize,
    /// Conditioning width `d`.
    pub cond_dim: usize,
    /// Attention projection width `d'`.
    pub attn_dim: usize,
    pub crop_size: usize,
    pub subject_widths: [usize; 2],
    /// Subject feature width `d_img`.
    pub subject_dim: usize,
    /// Rows in the learned unconditional embedding.
    pub null_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image: GridShape::new(32, 32, 3),
            patch: 2,
            widths: [32, 64],
            time_dim: 32,
            temb_dim: 64,
            vocab_size: 32,
            cond_dim: 64,
            attn_dim: 32,
            crop_size: 16,
            subject_widths: [16, 32],
            subject_dim: 64,
            null_len: 2,
        }
    }
}

impl ModelConfig {
    /// A very small configuration for finite-difference checks.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            image: GridShape::new(8, 8, 3),
            patch: 2,
            widths: [3, 4],
            time_dim: 4,
            temb_dim: 4,
            vocab_size,
            cond_dim: 6,
            attn_dim: 3,
            crop_size: 4,
            subject_widths: [2, 2],
            subject_dim: 3,
            null_len: 2,
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            image: self.image,
            patch: self.patch,
            widths: self.widths,
            time_dim: self.time_dim,
            temb_dim: self.temb_dim,
            cond_dim: self.cond_dim,
            attn_dim: self.attn_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser().validate()?;
        if self.vocab_size == 0 || self.null_len == 0 || self.subject_dim == 0 || self.subject_widths.contains(&0) {
            return Err(CoreError::Config("model sizes must be positive".into()));
        }
        if self.crop_size == 0 || self.crop_size % 4 != 0 {
            return Err(CoreError::Config(format!("crop size {} must be a positive multiple of 4", self.crop_size)));
        }
        if self.cond_dim % 2 != 0 {
            return Err(CoreError::Config("conditioning width must be even".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ComposerModel<S> {
    pub cfg: ModelConfig,
    pub params: ParamStore<S>,
    pub text: TextEncoder,
    pub subject: SubjectEncoder,
    pub mlp: AugmentMlp,
    pub null: ParamId,
    pub denoiser: Denoiser,
}

/// Conditioning for one forward pass plus what is needed to backpropagate
/// into the trainable conditioning sources.
#[derive(Debug, Clone)]
pub struct BuiltConditioning<S> {
    pub rows: Mat<S>,
    pub mode: ConditionMode,
    subject_caches: Vec<SubjectEncoderCache<S>>,
    augment: Option<AugmentCache<S>>,
}

impl<S: Scalar> ComposerModel<S> {
    /// Deterministic initialization from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let text = TextEncoder::new(&mut params, &mut rng, cfg.vocab_size, cfg.cond_dim);
        let subject = SubjectEncoder::new(&mut params, &mut rng, "subject", cfg.crop_size, cfg.subject_widths, cfg.subject_dim);
        let mlp = AugmentMlp::new(&mut params, &mut rng, cfg.cond_dim, cfg.subject_dim);
        let null = params.add("null_cond", &[cfg.null_len, cfg.cond_dim], Init::Normal(1.0), true, &mut rng);
        let denoiser = Denoiser::new(&mut params, &mut rng, cfg.denoiser())?;
        Ok(ComposerModel { cfg, params, text, subject, mlp, null, denoiser })
    }

    /// Same architecture with parameters converted to another scalar type.
    pub fn cast<T: Scalar>(&self) -> ComposerModel<T> {
        ComposerModel {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            text: self.text.clone(),
            subject: self.subject.clone(),
            mlp: self.mlp.clone(),
            null: self.null,
            denoiser: self.denoiser.clone(),
        }
    }

    pub fn encode_text(&self, tokens: &[usize]) -> Result<ConditioningMatrix<S>> {
        self.text.encode(&self.params, tokens)
    }

    pub fn encode_subject(&self, crop: &LatentGrid<S>) -> Result<Vec<S>> {
        Ok(self.subject.forward(&self.params, crop)?.0)
    }

    pub fn null_conditioning(&self) -> Mat<S> {
        Mat::from_vec(self.cfg.null_len, self.cfg.cond_dim, self.params.get(self.null).to_vec())
    }

    pub fn augmented(&self, tokens: &[usize], subjects: &[SubjectRef<S>]) -> Result<AugmentedConditioning<S>> {
        let c = self.encode_text(tokens)?;
        let feats = subjects.iter().map(|s| self.encode_subject(&s.crop)).collect::<Result<Vec<_>>>()?;
        let idx: Vec<usize> = subjects.iter().map(|s| s.token_index).collect();
        Ok(augment_conditioning(&self.mlp, &self.params, &c, &idx, &feats)?.0)
    }

    /// Builds the conditioning for a training regime. `Full` with no
    /// subjects is plain text conditioning.
    pub fn build_conditioning(&self, mode: ConditionMode, tokens: &[usize], subjects: &[SubjectRef<S>]) -> Result<BuiltConditioning<S>> {
        match mode {
            ConditionMode::Unconditional => {
                Ok(BuiltConditioning { rows: self.null_conditioning(), mode, subject_caches: Vec::new(), augment: None })
            }
            ConditionMode::TextOnly => {
                Ok(BuiltConditioning { rows: self.encode_text(tokens)?.rows, mode, subject_caches: Vec::new(), augment: None })
            }
            ConditionMode::Full => {
                let c = self.encode_text(tokens)?;
                if subjects.is_empty() {
                    return Ok(BuiltConditioning { rows: c.rows, mode, subject_caches: Vec::new(), augment: None });
                }
                let mut feats = Vec::with_capacity(subjects.len());
                let mut caches = Vec::with_capacity(subjects.len());
                for s in subjects {
                    let (f, cache) = self.subject.forward(&self.params, &s.crop)?;
                    feats.push(f);
                    caches.push(cache);
                }
                let idx: Vec<usize> = subjects.iter().map(|s| s.token_index).collect();
                let (aug, acache) = augment_conditioning(&self.mlp, &self.params, &c, &idx, &feats)?;
                Ok(BuiltConditioning { rows: aug.rows, mode, subject_caches: caches, augment: Some(acache) })
            }
        }
    }

    /// Sends `d conditioning` into the fusion MLP, subject encoder or null
    /// embedding. Text rows are frozen and absorb nothing.
    pub fn backward_conditioning(&self, g: &mut Grads<S>, built: &BuiltConditioning<S>, dcond: &Mat<S>) {
        match built.mode {
            ConditionMode::Unconditional => {
                for (acc, &v) in g.get_mut(self.null).iter_mut().zip(&dcond.data) {
                    *acc += v;
                }
            }
            ConditionMode::TextOnly => {}
            ConditionMode::Full => {
                if let Some(aug) = &built.augment {
                    for ((row, cache), scache) in aug.entries.iter().zip(&built.subject_caches) {
                        let (_, dfeat) = self.mlp.backward(&self.params, g, cache, dcond.row(*row));
                        self.subject.backward(&self.params, g, scache, &dfeat);
                    }
                }
            }
        }
    }

    pub fn denoise(&self, z_t: &LatentGrid<S>, t: usize, cond: &Mat<S>) -> Result<(DenoiserOutput<S>, DenoiserCache<S>)> {
        self.denoiser.forward(&self.params, z_t, t, cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localization::SegmentationMask;

    #[test]
    fn construction_is_deterministic() {
        let a = ComposerModel::<f32>::new(ModelConfig::tiny(10), 3).unwrap();
        let b = ComposerModel::<f32>::new(ModelConfig::tiny(10), 3).unwrap();
        let c = ComposerModel::<f32>::new(ModelConfig::tiny(10), 4).unwrap();
        assert_eq!(a.params.tensors(), b.params.tensors());
        assert_ne!(a.params.tensors(), c.params.tensors());
    }

    #[test]
    fn text_encoder_is_frozen() {
        let m = ComposerModel::<f32>::new(ModelConfig::tiny(10), 3).unwrap();
        for t in m.params.tensors() {
            assert_eq!(t.trainable, !t.name.starts_with("text."), "{}", t.name);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = ModelConfig::tiny(10);
        cfg.crop_size = 6;
        assert!(matches!(ComposerModel::<f32>::new(cfg, 0), Err(CoreError::Config(_))));
        let mut cfg = ModelConfig::tiny(10);
        cfg.image = GridShape::new(6, 8, 3);
        assert!(matches!(ComposerModel::<f32>::new(cfg, 0), Err(CoreError::Config(_))));
    }

    #[test]
    fn conditioning_regimes() {
        let m = ComposerModel::<f64>::new(ModelConfig::tiny(10), 3).unwrap();
        let tokens = [1usize, 4, 5, 2];
        let crop = LatentGrid::filled(GridShape::new(4, 4, 3), 0.3);
        let subj = SubjectRef { crop, identity: None, mask: SegmentationMask::new(8, 8), token_index: 2 };
        let text = m.encode_text(&tokens).unwrap().rows;
        let full = m.build_conditioning(ConditionMode::Full, &tokens, std::slice::from_ref(&subj)).unwrap();
        for r in [0, 1, 3] {
            assert_eq!(full.rows.row(r), text.row(r));
        }
        assert_ne!(full.rows.row(2), text.row(2));
        let t_only = m.build_conditioning(ConditionMode::TextOnly, &tokens, &[subj.clone()]).unwrap();
        assert_eq!(t_only.rows, text);
        let empty = m.build_conditioning(ConditionMode::Full, &tokens, &[]).unwrap();
        assert_eq!(empty.rows, text);
        let unc = m.build_conditioning(ConditionMode::Unconditional, &tokens, &[subj]).unwrap();
        assert_eq!(unc.rows, m.null_conditioning());
    }
}
