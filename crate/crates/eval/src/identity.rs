//! Multi-subject identity preservation: greedy matching of detections to
//! references, scored by the worst-preserved reference.

use glyphcomp_core::SubjectRef;
use glyphcomp_world::greedy_assign;
use glyphcomp_world::BBox;
use serde::{Deserialize, Serialize};

use crate::detect::{masked_crop, Detection};
use crate::embedder::{cosine, IdentityEmbedder};
use crate::error::{EvalError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityScore {
    /// Minimum of `per_subject`.
    pub score: f64,
    /// Similarity of each reference to its matched detection, 0 if unmatched.
    pub per_subject: Vec<f64>,
    /// Matched detection index per reference.
    pub assignment: Vec<Option<usize>>,
}

/// Greedy assignment on a references x detections similarity matrix.
/// Pairs with negative similarity are never matched, so a missing subject
/// and a dissimilar one both score 0 and extra detections cannot hurt.
pub fn score_from_similarities(sims: &[Vec<f64>], detections: usize) -> IdentityScore {
    let mut per_subject = vec![0.0; sims.len()];
    let mut assignment = vec![None; sims.len()];
    for p in greedy_assign(sims, detections, 0.0) {
        per_subject[p.phrase] = p.score;
        assignment[p.phrase] = Some(p.segment);
    }
    let score = per_subject.iter().copied().fold(f64::INFINITY, f64::min);
    IdentityScore { score: if sims.is_empty() { 0.0 } else { score }, per_subject, assignment }
}

/// Normalized crop of a reference, built the same way as detection crops.
pub fn reference_crop(r: &SubjectRef<f32>, source: &glyphcomp_core::LatentGrid<f32>) -> Result<glyphcomp_core::LatentGrid<f32>> {
    let bbox = BBox::of(r.mask.height, r.mask.width, |y, x| r.mask.get(y, x))
        .ok_or_else(|| EvalError::Shape("reference mask is empty".into()))?;
    Ok(masked_crop(source, &r.mask, &bbox))
}

/// Scores `detections` against reference crops already normalized with
/// [`reference_crop`] or [`masked_crop`].
pub fn multi_subject_identity_score(
    embedder: &IdentityEmbedder,
    references: &[glyphcomp_core::LatentGrid<f32>],
    detections: &[Detection],
) -> Result<IdentityScore> {
    if references.is_empty() {
        return Err(EvalError::Shape("identity score needs at least one reference".into()));
    }
    let refs: Vec<Vec<f64>> = references.iter().map(|c| embedder.embed(c)).collect::<Result<_>>()?;
    let dets: Vec<Vec<f64>> = detections.iter().map(|d| embedder.embed(&d.crop)).collect::<Result<_>>()?;
    let sims: Vec<Vec<f64>> = refs.iter().map(|r| dets.iter().map(|d| cosine(r, d)).collect::<Result<_>>()).collect::<Result<_>>()?;
    Ok(score_from_similarities(&sims, dets.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_and_missing_detections() {
        let s = score_from_similarities(&[vec![0.7]], 1);
        assert_eq!((s.score, s.per_subject.clone()), (0.7, vec![0.7]));
        let s = score_from_similarities(&[vec![], vec![]], 0);
        assert_eq!(s.score, 0.0);
        assert_eq!(s.assignment, vec![None, None]);
    }

    #[test]
    fn minimum_over_references() {
        let s = score_from_similarities(&[vec![0.9, 0.2], vec![0.8, 0.4]], 2);
        assert_eq!(s.assignment, vec![Some(0), Some(1)]);
        assert_eq!(s.score, 0.4);
        let s = score_from_similarities(&[vec![-0.3]], 1);
        assert_eq!((s.score, s.assignment), (0.0, vec![None]));
    }
}
