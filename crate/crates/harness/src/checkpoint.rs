//! Checkpoint file: magic, little-endian `u64` header length, JSON header,
//! then every tensor as little-endian `f32` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use glyphcomp_core::{Adam, AdamConfig, ComposerModel, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"GLYPHCKP";
pub const FORMAT_VERSION: u32 = 1;
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";
const EMA: &str = "ema.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config_hash: String,
    pub step: u64,
    pub adam_step: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub step: u64,
    pub adam_step: u64,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_params(params: &ParamStore<f32>, config_hash: &str, step: u64) -> Checkpoint {
        let tensors = params
            .tensors()
            .iter()
            .map(|t| NamedTensor { name: t.name.clone(), shape: t.shape.clone(), trainable: t.trainable, data: t.data.clone() })
            .collect();
        Checkpoint { config_hash: config_hash.to_string(), step, adam_step: 0, tensors }
    }

    /// Model parameters followed by the Adam moments of every tensor and,
    /// when given, the averaged weights.
    pub fn from_training(model: &ComposerModel<f32>, opt: &Adam<f32>, ema: Option<&[Vec<f32>]>, config_hash: &str, step: u64) -> Checkpoint {
        let mut ck = Checkpoint::from_params(&model.params, config_hash, step);
        ck.adam_step = opt.step;
        let mut groups = vec![(ADAM_M, opt.m.as_slice()), (ADAM_V, opt.v.as_slice())];
        groups.extend(ema.map(|e| (EMA, e)));
        for (prefix, moments) in groups {
            for (t, m) in model.params.tensors().iter().zip(moments.iter()) {
                ck.tensors.push(NamedTensor { name: format!("{prefix}{}", t.name), shape: t.shape.clone(), trainable: false, data: m.clone() });
            }
        }
        ck
    }

    fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Copies stored values into `params`, which must have the same tensor
    /// names and shapes.
    pub fn restore_params(&self, params: &mut ParamStore<f32>, path: &Path) -> Result<()> {
        for t in params.tensors_mut() {
            let s = self.tensor(&t.name).ok_or_else(|| HarnessError::checkpoint(path, format!("missing tensor {}", t.name)))?;
            if s.shape != t.shape {
                return Err(HarnessError::checkpoint(path, format!("tensor {} has shape {:?}, model expects {:?}", t.name, s.shape, t.shape)));
            }
            t.data.copy_from_slice(&s.data);
        }
        Ok(())
    }

    pub fn has_ema(&self) -> bool {
        self.tensors.iter().any(|t| t.name.starts_with(EMA))
    }

    /// Averaged weights in the order of `params`, if the checkpoint has them.
    pub fn ema(&self, params: &ParamStore<f32>, path: &Path) -> Result<Option<Vec<Vec<f32>>>> {
        if !self.has_ema() {
            return Ok(None);
        }
        let mut out = Vec::with_capacity(params.len());
        for t in params.tensors() {
            let name = format!("{EMA}{}", t.name);
            let s = self.tensor(&name).ok_or_else(|| HarnessError::checkpoint(path, format!("missing tensor {name}")))?;
            if s.data.len() != t.data.len() {
                return Err(HarnessError::checkpoint(path, format!("tensor {name} has the wrong size")));
            }
            out.push(s.data.clone());
        }
        Ok(Some(out))
    }

    pub fn restore_training(&self, model: &mut ComposerModel<f32>, adam: AdamConfig, path: &Path) -> Result<Adam<f32>> {
        self.restore_params(&mut model.params, path)?;
        let mut opt = Adam::new(adam, &model.params);
        opt.step = self.adam_step;
        for (prefix, moments) in [(ADAM_M, &mut opt.m), (ADAM_V, &mut opt.v)] {
            for (t, m) in model.params.tensors().iter().zip(moments.iter_mut()) {
                let name = format!("{prefix}{}", t.name);
                let s = self.tensor(&name).ok_or_else(|| HarnessError::checkpoint(path, format!("missing tensor {name}")))?;
                if s.data.len() != m.len() {
                    return Err(HarnessError::checkpoint(path, format!("tensor {name} has the wrong size")));
                }
                m.copy_from_slice(&s.data);
            }
        }
        Ok(opt)
    }

    pub fn header(&self) -> CheckpointHeader {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let e = TensorEntry { name: t.name.clone(), shape: t.shape.clone(), dtype: "f32".into(), offset, trainable: t.trainable };
                offset += 4 * t.data.len() as u64;
                e
            })
            .collect();
        CheckpointHeader { format_version: FORMAT_VERSION, config_hash: self.config_hash.clone(), step: self.step, adam_step: self.adam_step, tensors }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + self.tensors.iter().map(|t| 4 * t.data.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let bad = |m: String| HarnessError::checkpoint(path, m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..body]).map_err(|e| bad(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format_version {}", header.format_version)));
        }
        let blob = &bytes[body..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected = 0u64;
        for e in &header.tensors {
            if e.dtype != "f32" {
                return Err(bad(format!("tensor {} has dtype {}", e.name, e.dtype)));
            }
            if e.offset != expected {
                return Err(bad(format!("tensor {} is not contiguous", e.name)));
            }
            let n: usize = e.shape.iter().product();
            let (start, end) = (e.offset as usize, e.offset as usize + 4 * n);
            if end > blob.len() {
                return Err(bad(format!("tensor {} runs past the end of the file", e.name)));
            }
            let data = blob[start..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push(NamedTensor { name: e.name.clone(), shape: e.shape.clone(), trainable: e.trainable, data });
            expected = end as u64;
        }
        if expected as usize != blob.len() {
            return Err(bad(format!("{} trailing bytes", blob.len() - expected as usize)));
        }
        Ok(Checkpoint { config_hash: header.config_hash, step: header.step, adam_step: header.adam_step, tensors })
    }

    /// Writes to a temporary sibling and renames, so a crash never leaves a
    /// half-written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| HarnessError::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| HarnessError::io(&tmp, e))?;
        f.sync_all().map_err(|e| HarnessError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }

    pub fn params(&self) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in &self.tensors {
            let id = store.add(t.name.clone(), &t.shape, glyphcomp_core::params::Init::Zeros, t.trainable, &mut rng);
            store.get_mut(id).copy_from_slice(&t.data);
        }
        store
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use glyphcomp_core::ModelConfig;

    fn trained() -> (ComposerModel<f32>, Adam<f32>) {
        let model = ComposerModel::<f32>::new(ModelConfig::tiny(10), 3).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &model.params);
        opt.step = 5;
        for (i, m) in opt.m.iter_mut().enumerate() {
            m.iter_mut().enumerate().for_each(|(j, v)| *v = (i * 31 + j) as f32 * 1e-3);
        }
        (model, opt)
    }

    #[test]
    fn load_then_save_is_byte_identical() {
        let (model, opt) = trained();
        let ema: Vec<Vec<f32>> = model.params.tensors().iter().map(|t| t.data.iter().map(|v| v * 0.5).collect()).collect();
        let ck = Checkpoint::from_training(&model, &opt, Some(&ema), "abc", 42);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let mut m2 = ComposerModel::<f32>::new(ModelConfig::tiny(10), 99).unwrap();
        let o2 = back.restore_training(&mut m2, AdamConfig::default(), Path::new("mem")).unwrap();
        assert_eq!(m2.params, model.params);
        assert_eq!((o2.step, &o2.m, &o2.v), (5, &opt.m, &opt.v));
        let e2 = back.ema(&m2.params, Path::new("mem")).unwrap().unwrap();
        assert_eq!(e2, ema);
        assert_eq!(Checkpoint::from_training(&m2, &o2, Some(&e2), "abc", 42).to_bytes(), bytes);
        let plain = Checkpoint::from_training(&model, &opt, None, "abc", 42);
        assert!(!plain.has_ema() && plain.ema(&model.params, Path::new("mem")).unwrap().is_none());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (model, opt) = trained();
        let bytes = Checkpoint::from_training(&model, &opt, None, "abc", 1).to_bytes();
        let p = Path::new("mem");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4], p).is_err());
        assert!(Checkpoint::from_bytes(b"GLYPHCKX\0\0\0\0\0\0\0\0", p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, p).unwrap_err().to_string().contains("trailing"));
        let other = ComposerModel::<f32>::new(ModelConfig::tiny(12), 3).unwrap();
        let ck = Checkpoint::from_params(&other.params, "x", 0);
        let mut m = model.clone();
        assert!(ck.restore_params(&mut m.params, p).unwrap_err().to_string().contains("shape"));
    }
}
