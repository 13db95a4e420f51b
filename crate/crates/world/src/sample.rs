//! Turning a scene and its phrase matching into a training sample with
//! background-noised subject crops.

use glyphcomp_core::{LatentGrid, SegmentationMask, SubjectRef};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, WorldError};
use crate::grammar::{chunk_phrases, Chunked};
use crate::matching::{class_label_sim, color_image_sim, describe_phrases, describe_segments, greedy_match, Matching};
use crate::render::BBox;
use crate::scene::Scene;

/// Side of the square subject crops.
pub const CROP_SIZE: usize = 16;

#[derive(Debug, Clone)]
pub struct TrainingSample {
    /// Caption with numbered plurals expanded.
    pub tokens: Vec<usize>,
    /// Target image, values in `[0, 1]`.
    pub image: LatentGrid<f32>,
    pub subjects: Vec<SubjectRef<f32>>,
}

/// Top-left corner of the `size x size` window centered on `bbox`, shifted
/// to stay inside an `h x w` image.
pub fn crop_window(bbox: &BBox, size: usize, h: usize, w: usize) -> (usize, usize) {
    let (cx, cy) = bbox.center();
    let place = |c: f64, limit: usize| ((c - size as f64 / 2.0).round().max(0.0) as usize).min(limit.saturating_sub(size));
    (place(cy, h), place(cx, w))
}

/// Crops `image` and replaces every pixel outside `mask` with independent
/// uniform noise in `[0, 1]`.
pub fn noised_crop(
    image: &LatentGrid<f32>,
    mask: &SegmentationMask,
    y0: usize,
    x0: usize,
    size: usize,
    rng: &mut impl Rng,
) -> Result<LatentGrid<f32>> {
    let mut crop = image.crop(y0, x0, size, size)?;
    let mut any = false;
    for y in 0..size {
        for x in 0..size {
            if mask.get(y0 + y, x0 + x) {
                any = true;
                continue;
            }
            for c in 0..crop.channels() {
                crop.set(y, x, c, rng.random::<f32>());
            }
        }
    }
    if !any {
        return Err(WorldError::Sample("subject mask is empty inside its crop".into()));
    }
    Ok(crop)
}

/// Default matcher: color-word correlation times class agreement.
pub fn match_scene(scene: &Scene, chunked: &Chunked, threshold: f64) -> Matching {
    let phrases = describe_phrases(&chunked.tokens, &chunked.spans);
    let segments = describe_segments(scene);
    greedy_match(&phrases, &segments, color_image_sim, class_label_sim, threshold)
}

/// One subject reference per matched phrase; unmatched segments are ignored
/// and unmatched phrases stay plain text.
pub fn build_training_sample(scene: &Scene, chunked: &Chunked, matching: &Matching, noise_seed: u64) -> Result<TrainingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let (h, w) = (scene.height(), scene.width());
    let mut subjects = Vec::with_capacity(matching.pairs.len());
    let mut pairs = matching.pairs.clone();
    pairs.sort_by_key(|p| p.phrase);
    for p in pairs {
        let span = chunked
            .spans
            .get(p.phrase)
            .ok_or_else(|| WorldError::Sample(format!("phrase {} out of range ({} phrases)", p.phrase, chunked.spans.len())))?;
        let seg = scene
            .segments
            .get(p.segment)
            .ok_or_else(|| WorldError::Sample(format!("segment {} out of range ({} segments)", p.segment, scene.segments.len())))?;
        let mask = scene.segment_mask(seg.id);
        if mask.is_empty() {
            return Err(WorldError::Sample(format!("segment {} has an empty mask", seg.id)));
        }
        let (y0, x0) = crop_window(&seg.bbox, CROP_SIZE, h, w);
        let crop = noised_crop(&scene.image, &mask, y0, x0, CROP_SIZE, &mut rng)?;
        subjects.push(SubjectRef { crop, identity: Some(seg.identity), mask, token_index: span.head_index() });
    }
    Ok(TrainingSample { tokens: chunked.tokens.clone(), image: scene.image.clone(), subjects })
}

/// Chunk, match and build in one go.
pub fn scene_to_sample(scene: &Scene, threshold: f64, noise_seed: u64) -> Result<TrainingSample> {
    let chunked = chunk_phrases(&scene.caption)?;
    let matching = match_scene(scene, &chunked, threshold);
    build_training_sample(scene, &chunked, &matching, noise_seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::MatchPair;
    use crate::scene::{generate_world, Split, WorldConfig};
    use glyphcomp_core::GridShape;

    #[test]
    fn full_mask_crop_is_unchanged() {
        let shape = GridShape::new(4, 4, 3);
        let img = LatentGrid::from_vec(shape, (0..48).map(|i| i as f32 / 48.0).collect()).unwrap();
        let mask = SegmentationMask::from_fn(4, 4, |_, _| true);
        let c = noised_crop(&img, &mask, 0, 0, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(c, img);
        let empty = SegmentationMask::new(4, 4);
        assert!(matches!(noised_crop(&img, &empty, 0, 0, 4, &mut ChaCha8Rng::seed_from_u64(0)), Err(WorldError::Sample(_))));
    }

    #[test]
    fn noise_touches_only_background() {
        let w = generate_world(WorldConfig::default(), 2).unwrap();
        for i in 0..30 {
            let scene = w.scene(Split::Train, i).unwrap();
            let a = scene_to_sample(&scene, 0.0, 1).unwrap();
            let b = scene_to_sample(&scene, 0.0, 2).unwrap();
            assert_eq!(a.subjects.len(), scene.segments.len());
            for (sa, sb) in a.subjects.iter().zip(&b.subjects) {
                let seg = scene.segments.iter().find(|s| scene.segment_mask(s.id) == sa.mask).unwrap();
                let (y0, x0) = crop_window(&seg.bbox, CROP_SIZE, 32, 32);
                let mut differ = 0;
                for y in 0..CROP_SIZE {
                    for x in 0..CROP_SIZE {
                        if sa.mask.get(y0 + y, x0 + x) {
                            assert_eq!(sa.crop.pixel(y, x), scene.image.pixel(y0 + y, x0 + x));
                            assert_eq!(sa.crop.pixel(y, x), sb.crop.pixel(y, x));
                        } else if sa.crop.pixel(y, x) != sb.crop.pixel(y, x) {
                            differ += 1;
                        }
                    }
                }
                assert!(differ > 0);
                assert_eq!(a.tokens[sa.token_index], crate::vocab::GLYPH);
            }
        }
    }

    // Errors may only come from genuinely ambiguous phrases: no color word,
    // or another glyph of the same named hue.
    #[test]
    fn matched_pairs_follow_ground_truth() {
        let w = generate_world(WorldConfig::default(), 4).unwrap();
        let mut ok = 0;
        let n = 300;
        for i in 0..n {
            let scene = w.scene(Split::Train, i).unwrap();
            let chunked = chunk_phrases(&scene.caption).unwrap();
            let phrases = describe_phrases(&chunked.tokens, &chunked.spans);
            let m = match_scene(&scene, &chunked, 0.0);
            let hue = |seg: usize| w.identity(scene.segments[seg].identity).hue_name();
            let mut all = true;
            for (span, label) in &scene.gt_pairs {
                let p = chunked.spans.iter().position(|s| s == span).unwrap();
                let truth = scene.segments.iter().position(|s| s.id == *label).unwrap();
                let got = m.phrase_to_segment[p].unwrap();
                if got != truth {
                    all = false;
                    assert!(phrases[p].color.is_none() || hue(got) == hue(truth), "scene {i} phrase {p}");
                }
            }
            ok += all as usize;
        }
        assert!(ok as f64 >= 0.85 * n as f64, "{ok}/{n}");
    }

    #[test]
    fn bad_matching_is_rejected() {
        let w = generate_world(WorldConfig::default(), 2).unwrap();
        let scene = w.scene(Split::Train, 0).unwrap();
        let chunked = chunk_phrases(&scene.caption).unwrap();
        let m = Matching { pairs: vec![MatchPair { phrase: 9, segment: 0, score: 1.0 }], phrase_to_segment: vec![] };
        assert!(build_training_sample(&scene, &chunked, &m, 0).is_err());
        let m = Matching { pairs: vec![MatchPair { phrase: 0, segment: 9, score: 1.0 }], phrase_to_segment: vec![] };
        assert!(build_training_sample(&scene, &chunked, &m, 0).is_err());
    }
}
