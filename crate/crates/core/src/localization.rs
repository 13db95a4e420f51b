//! Cross-attention localization: mask pooling, the balanced L1 objective and
//! the combined training loss.

use serde::{Deserialize, Serialize};

use crate::denoiser::AttentionRecord;
use crate::encoders::SubjectRef;
use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;

/// Default weight of the localization term.
pub const DEFAULT_LAMBDA: f64 = 0.001;

/// Binary `H x W` mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentationMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl SegmentationMask {
    pub fn new(height: usize, width: usize) -> Self {
        SegmentationMask { height, width, bits: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        SegmentationMask { height, width, bits }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn area_fraction(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.count() as f64 / self.bits.len() as f64
    }

    pub fn union(&self, other: &SegmentationMask) -> SegmentationMask {
        assert_eq!((self.height, self.width), (other.height, other.width), "mask union dims");
        SegmentationMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        }
    }

    pub fn intersects(&self, other: &SegmentationMask) -> bool {
        self.bits.iter().zip(&other.bits).any(|(a, b)| *a && *b)
    }
}

/// Area-pools `mask` to `h x w`: a cell is set when at least half of it is
/// covered. A non-empty mask that vanishes keeps the cell holding its
/// centroid.
pub fn downsample_mask(mask: &SegmentationMask, h: usize, w: usize) -> Result<SegmentationMask> {
    if h == 0 || w == 0 || mask.height % h != 0 || mask.width % w != 0 {
        return Err(CoreError::Shape(format!(
            "cannot pool {}x{} mask to {h}x{w}",
            mask.height, mask.width
        )));
    }
    let (fy, fx) = (mask.height / h, mask.width / w);
    let cell_area = fy * fx;
    let mut out = SegmentationMask::new(h, w);
    for cy in 0..h {
        for cx in 0..w {
            let mut covered = 0;
            for y in cy * fy..(cy + 1) * fy {
                for x in cx * fx..(cx + 1) * fx {
                    covered += mask.get(y, x) as usize;
                }
            }
            out.set(cy, cx, 2 * covered >= cell_area);
        }
    }
    if out.is_empty() && !mask.is_empty() {
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.get(y, x) {
                    sy += y as f64 + 0.5;
                    sx += x as f64 + 0.5;
                    n += 1.0;
                }
            }
        }
        let cy = ((sy / n / fy as f64) as usize).min(h - 1);
        let cx = ((sx / n / fx as f64) as usize).min(w - 1);
        out.set(cy, cx, true);
    }
    Ok(out)
}

/// `mean(A over background) - mean(A over subject)` for one token's map.
///
/// Returns `None` when the mask is all-true or all-false; callers drop such
/// pairs from their averages.
pub fn balanced_l1<S: Scalar>(map: &[S], mask: &SegmentationMask) -> Option<S> {
    assert_eq!(map.len(), mask.bits.len(), "balanced_l1: map and mask sizes differ");
    let fg = mask.count();
    let bg = mask.bits.len() - fg;
    if fg == 0 || bg == 0 {
        return None;
    }
    let (mut sum_fg, mut sum_bg) = (S::zero(), S::zero());
    for (&a, &m) in map.iter().zip(&mask.bits) {
        if m {
            sum_fg += a;
        } else {
            sum_bg += a;
        }
    }
    Some(sum_bg / S::c(bg as f64) - sum_fg / S::c(fg as f64))
}

/// Gradient of [`balanced_l1`] with respect to the map entries.
pub fn balanced_l1_grad<S: Scalar>(mask: &SegmentationMask) -> Option<Vec<S>> {
    let fg = mask.count();
    let bg = mask.bits.len() - fg;
    if fg == 0 || bg == 0 {
        return None;
    }
    let gf = -S::one() / S::c(fg as f64);
    let gb = S::one() / S::c(bg as f64);
    Some(mask.bits.iter().map(|&m| if m { gf } else { gb }).collect())
}

#[derive(Debug, Clone)]
pub struct LocalizationLoss<S> {
    pub value: S,
    /// `dL_loc / dA` for each record (None for records that did not contribute).
    pub grads: Vec<Option<Mat<S>>>,
    pub contributing_blocks: usize,
    /// Set when no (block, subject) pair contributed and the loss fell back to 0.
    pub warning: bool,
}

/// Localization loss over the inner-block records: per block, the mean of
/// balanced L1 over subjects; then the mean over blocks that had at least one
/// usable subject.
pub fn localization_loss<S: Scalar>(records: &[AttentionRecord<S>], subjects: &[SubjectRef<S>]) -> Result<LocalizationLoss<S>> {
    let mut grads: Vec<Option<Mat<S>>> = vec![None; records.len()];
    let mut block_values = Vec::new();
    for (ri, rec) in records.iter().enumerate() {
        if !rec.is_inner_block {
            continue;
        }
        let (h, w) = rec.resolution;
        let n = rec.map.cols;
        let mut terms: Vec<(usize, S, Vec<S>)> = Vec::new();
        for s in subjects {
            if s.token_index >= n {
                return Err(CoreError::Index { index: s.token_index, len: n });
            }
            let small = downsample_mask(&s.mask, h, w)?;
            let column: Vec<S> = (0..h * w).map(|p| rec.map.at(p, s.token_index)).collect();
            if let (Some(v), Some(g)) = (balanced_l1(&column, &small), balanced_l1_grad::<S>(&small)) {
                terms.push((s.token_index, v, g));
            }
        }
        if terms.is_empty() {
            continue;
        }
        let m = S::c(terms.len() as f64);
        let value = terms.iter().map(|t| t.1).sum::<S>() / m;
        let mut g = Mat::zeros(h * w, n);
        for (col, _, tg) in &terms {
            for (p, &v) in tg.iter().enumerate() {
                g.data[p * n + col] += v / m;
            }
        }
        block_values.push(value);
        grads[ri] = Some(g);
    }
    if block_values.is_empty() {
        return Ok(LocalizationLoss { value: S::zero(), grads, contributing_blocks: 0, warning: true });
    }
    let nb = S::c(block_values.len() as f64);
    for g in grads.iter_mut().flatten() {
        g.data.iter_mut().for_each(|v| *v /= nb);
    }
    let value = block_values.iter().copied().sum::<S>() / nb;
    Ok(LocalizationLoss { value, grads, contributing_blocks: block_values.len(), warning: false })
}

/// Whether any inner-block resolution leaves some subject mask with both
/// foreground and background cells, i.e. whether the loss is defined.
pub fn has_usable_pair<S: Scalar>(inner_resolutions: &[(usize, usize)], subjects: &[SubjectRef<S>]) -> Result<bool> {
    for &(h, w) in inner_resolutions {
        for s in subjects {
            let c = downsample_mask(&s.mask, h, w)?.count();
            if c > 0 && c < h * w {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// `L = L_noise + lambda * L_loc`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub noise: f64,
    pub loc: f64,
    pub lambda: f64,
    pub total: f64,
}

pub fn total_loss(noise: f64, loc: f64, lambda: f64) -> LossBreakdown {
    LossBreakdown { noise, loc, lambda, total: noise + lambda * loc }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{GridShape, LatentGrid};
    use proptest::prelude::*;

    fn mask_from(bits: &[bool], h: usize, w: usize) -> SegmentationMask {
        SegmentationMask { height: h, width: w, bits: bits.to_vec() }
    }

    fn subject(token_index: usize, mask: SegmentationMask) -> SubjectRef<f64> {
        SubjectRef { crop: LatentGrid::zeros(GridShape::new(1, 1, 3)), identity: None, mask, token_index }
    }

    fn record(map: Mat<f64>, h: usize, w: usize, inner: bool) -> AttentionRecord<f64> {
        AttentionRecord { layer_id: "t".into(), resolution: (h, w), map, is_inner_block: inner }
    }

    #[test]
    fn balanced_l1_hand_cases() {
        let m = mask_from(&[false, true, false, true], 2, 2);
        let v = balanced_l1(&[0.1f64, 0.9, 0.3, 0.7], &m).unwrap();
        assert!((v - -0.6).abs() < 1e-12);
        let indicator: Vec<f64> = m.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        assert_eq!(balanced_l1(&indicator, &m), Some(-1.0));
        assert_eq!(balanced_l1(&[0.25f64; 4], &m), Some(0.0));
    }

    #[test]
    fn balanced_l1_skips_degenerate_masks() {
        assert_eq!(balanced_l1(&[0.5f64; 4], &mask_from(&[true; 4], 2, 2)), None);
        assert_eq!(balanced_l1(&[0.5f64; 4], &mask_from(&[false; 4], 2, 2)), None);
    }

    #[test]
    fn downsample_full_and_centroid_fallback() {
        let full = SegmentationMask::from_fn(4, 4, |_, _| true);
        assert!(downsample_mask(&full, 2, 2).unwrap().bits.iter().all(|&b| b));
        let mut one = SegmentationMask::new(4, 4);
        one.set(3, 0, true);
        let d = downsample_mask(&one, 2, 2).unwrap();
        assert_eq!(d.count(), 1);
        assert!(d.get(1, 0));
        assert!(downsample_mask(&one, 3, 2).is_err());
    }

    #[test]
    fn localization_loss_double_average_by_hand() {
        // Two subjects (tokens 1 and 2), two inner blocks at 2x2, n = 3.
        let m1 = mask_from(&[true, false, false, false], 2, 2);
        let m2 = mask_from(&[false, false, true, true], 2, 2);
        let a = Mat::from_vec(4, 3, vec![
            0.2, 0.7, 0.1, //
            0.5, 0.2, 0.3, //
            0.4, 0.1, 0.5, //
            0.3, 0.3, 0.4,
        ]);
        let b = Mat::from_vec(4, 3, vec![
            0.1, 0.1, 0.8, //
            0.6, 0.3, 0.1, //
            0.2, 0.2, 0.6, //
            0.5, 0.4, 0.1,
        ]);
        // block a: subj1 col1 bg (0.2+0.1+0.3)/3=0.2, fg 0.7 -> -0.5
        //          subj2 col2 bg (0.1+0.3)/2=0.2, fg (0.5+0.4)/2=0.45 -> -0.25
        // block b: subj1 bg (0.3+0.2+0.4)/3=0.3, fg 0.1 -> 0.2
        //          subj2 bg (0.8+0.1)/2=0.45, fg (0.6+0.1)/2=0.35 -> 0.1
        let want = ((-0.5 + -0.25) / 2.0 + (0.2 + 0.1) / 2.0) / 2.0;
        let recs = vec![record(a, 2, 2, true), record(b, 2, 2, true), record(Mat::zeros(4, 3), 2, 2, false)];
        let subs = vec![subject(1, m1), subject(2, m2)];
        let loss = localization_loss(&recs, &subs).unwrap();
        assert!((loss.value - want).abs() < 1e-12, "{} vs {want}", loss.value);
        assert_eq!(loss.contributing_blocks, 2);
        assert!(loss.grads[2].is_none());
    }

    #[test]
    fn localization_loss_indicator_and_uniform() {
        let m = mask_from(&[false, true, true, false], 2, 2);
        let mut map = Mat::zeros(4, 2);
        for p in 0..4 {
            map.data[p * 2 + 1] = if m.bits[p] { 1.0 } else { 0.0 };
            map.data[p * 2] = 1.0 - map.data[p * 2 + 1];
        }
        let loss = localization_loss(&[record(map, 2, 2, true)], &[subject(1, m.clone())]).unwrap();
        assert_eq!(loss.value, -1.0);
        let uni = Mat::from_vec(4, 2, vec![0.5; 8]);
        let loss = localization_loss(&[record(uni, 2, 2, true)], &[subject(1, m)]).unwrap();
        assert_eq!(loss.value, 0.0);
    }

    #[test]
    fn no_contributing_pairs_warns() {
        let full = SegmentationMask::from_fn(2, 2, |_, _| true);
        let loss = localization_loss(&[record(Mat::from_vec(4, 1, vec![1.0; 4]), 2, 2, true)], &[subject(0, full)]).unwrap();
        assert_eq!(loss.value, 0.0);
        assert!(loss.warning);
    }

    #[test]
    fn total_loss_combines_exactly() {
        assert_eq!(total_loss(0.5, -1.0, DEFAULT_LAMBDA).total, 0.499);
        assert_eq!(total_loss(0.7, 0.3, 0.0).total, 0.7);
        assert_eq!(total_loss(1.0, 0.2, 0.5).total, 1.1);
    }

    proptest! {
        #[test]
        fn downsample_equals_bruteforce_count(bits in proptest::collection::vec(any::<bool>(), 32 * 32)) {
            let m = mask_from(&bits, 32, 32);
            let d = downsample_mask(&m, 16, 16).unwrap();
            let mut brute = Vec::with_capacity(256);
            for cy in 0..16 {
                for cx in 0..16 {
                    let c = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .filter(|(dy, dx)| bits[(2 * cy + dy) * 32 + 2 * cx + dx])
                        .count();
                    brute.push(c >= 2);
                }
            }
            if brute.iter().any(|&b| b) || m.is_empty() {
                prop_assert_eq!(d.bits, brute);
            } else {
                prop_assert_eq!(d.count(), 1);
            }
        }

        #[test]
        fn balanced_l1_range_shift_and_gradient(
            vals in proptest::collection::vec(0.0f64..0.5, 16),
            bits in proptest::collection::vec(any::<bool>(), 16),
            delta in 0.0f64..0.5,
        ) {
            let m = mask_from(&bits, 4, 4);
            prop_assume!(m.count() > 0 && m.count() < 16);
            let v = balanced_l1(&vals, &m).unwrap();
            prop_assert!((-1.0..=1.0).contains(&v));
            let shifted: Vec<f64> = vals.iter().map(|x| x + delta).collect();
            prop_assert!((balanced_l1(&shifted, &m).unwrap() - v).abs() < 1e-12);
            let g = balanced_l1_grad::<f64>(&m).unwrap();
            for i in 0..16 {
                let mut p = vals.clone();
                p[i] += 1e-6;
                let num = (balanced_l1(&p, &m).unwrap() - v) / 1e-6;
                prop_assert!((num - g[i]).abs() < 1e-6);
            }
        }
    }
}
