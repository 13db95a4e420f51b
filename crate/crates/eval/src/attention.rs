//! Agreement between a token's cross-attention and a subject mask.

use glyphcomp_core::{downsample_mask, AttentionRecord, Scalar, SegmentationMask};

use crate::error::{EvalError, Result};

/// IoU between column `token_index` of `record.map` binarized at
/// `threshold` (cells `>= threshold`) and `mask` pooled to the record's
/// resolution. `None` when the pooled mask is empty.
pub fn attention_iou<S: Scalar>(record: &AttentionRecord<S>, token_index: usize, mask: &SegmentationMask, threshold: f64) -> Result<Option<f64>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(EvalError::Shape(format!("threshold {threshold} outside (0, 1)")));
    }
    let (h, w) = record.resolution;
    if record.map.rows != h * w || token_index >= record.map.cols {
        return Err(EvalError::Shape(format!(
            "token {token_index} of a {}x{} map at {h}x{w}",
            record.map.rows, record.map.cols
        )));
    }
    let m = if (mask.height, mask.width) == (h, w) { mask.clone() } else { downsample_mask(mask, h, w)? };
    if m.is_empty() {
        return Ok(None);
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (i, &inside) in m.bits.iter().enumerate() {
        let on = record.map.at(i, token_index).f64() >= threshold;
        inter += (on && inside) as usize;
        union += (on || inside) as usize;
    }
    Ok(Some(inter as f64 / union as f64))
}
