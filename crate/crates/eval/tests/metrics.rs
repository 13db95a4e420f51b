use glyphcomp_core::{GridShape, LatentGrid};
use glyphcomp_eval::embedder::{render_identity_crop, separation_margin};
use glyphcomp_eval::*;
use glyphcomp_world::grammar::{compose_caption, sample_caption};
use glyphcomp_world::{generate_world, Hue, Split, Style, WorldConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straightforward re-implementation: repeatedly scan for the largest
/// non-negative entry among unused rows and columns.
fn reference_identity_score(sims: &[Vec<f64>], cols: usize) -> (f64, Vec<f64>) {
    let mut per = vec![0.0; sims.len()];
    let mut row_done = vec![false; sims.len()];
    let mut col_done = vec![false; cols];
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..sims.len() {
            for j in 0..cols {
                if row_done[i] || col_done[j] || sims[i][j] < 0.0 {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((s, _, _)) => sims[i][j] > s,
                };
                if better {
                    best = Some((sims[i][j], i, j));
                }
            }
        }
        let Some((s, i, j)) = best else { break };
        per[i] = s;
        row_done[i] = true;
        col_done[j] = true;
    }
    let mut score = f64::INFINITY;
    for &p in &per {
        if p < score {
            score = p;
        }
    }
    (score, per)
}

fn random_sims(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let coarse = rng.random_bool(0.3);
    (0..rows)
        .map(|_| (0..cols).map(|_| if coarse { rng.random_range(-2..=4) as f64 / 4.0 } else { rng.random_range(-1.0..1.0) }).collect())
        .collect()
}

#[test]
fn identity_score_agrees_with_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..1000 {
        let (rows, cols) = (rng.random_range(1..=4), rng.random_range(0..=4));
        let sims = random_sims(&mut rng, rows, cols);
        let got = score_from_similarities(&sims, cols);
        let (score, per) = reference_identity_score(&sims, cols);
        assert_eq!((got.score, got.per_subject.clone()), (score, per), "{sims:?}");
    }
    for _ in 0..1000 {
        let sims = random_sims(&mut rng, 3, 3);
        let got = score_from_similarities(&sims, 3);
        assert_eq!((got.score, got.per_subject), reference_identity_score(&sims, 3));
    }
}

proptest! {
    #[test]
    fn adding_a_detection_never_lowers_the_score(seed in any::<u64>(), rows in 1usize..5, cols in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let with = random_sims(&mut rng, rows, cols + 1);
        let without: Vec<Vec<f64>> = with.iter().map(|r| r[..cols].to_vec()).collect();
        let a = score_from_similarities(&without, cols);
        let b = score_from_similarities(&with, cols + 1);
        prop_assert!(b.score >= a.score);
        let min = b.per_subject.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(b.score, min);
    }
}

#[test]
fn detection_counts_on_clean_scenes() {
    let w = generate_world(WorldConfig::default(), 13).unwrap();
    let cfg = DetectorConfig::default();
    let n = 1000;
    let ok = (0..n).filter(|&i| {
        let s = w.scene(Split::Train, i).unwrap();
        detect_subjects(&s.image, &cfg).len() == s.segments.len()
    });
    let ok = ok.count();
    assert!(ok as f64 >= 0.99 * n as f64, "{ok}/{n}");
}

#[test]
fn ground_truth_scenes_are_fully_consistent() {
    let w = generate_world(WorldConfig::default(), 17).unwrap();
    let cfg = DetectorConfig::default();
    for i in 0..1000 {
        let s = w.scene(Split::Heldout, i).unwrap();
        let c = prompt_consistency(&s.image, &s.caption, &cfg).unwrap();
        assert_eq!(c.score, 1.0, "scene {i}: {c:?}");
    }
}

#[test]
fn wrong_field_costs_one_attribute() {
    let w = generate_world(WorldConfig::default(), 17).unwrap();
    let s = w.scene(Split::Train, 0).unwrap();
    let other = Hue::ALL.iter().copied().find(|&h| h != s.field).unwrap();
    let k = s.segments.len();
    let caption = compose_caption(&vec![None; k], false, Some(other), s.style);
    let c = prompt_consistency(&s.image, &caption, &DetectorConfig::default()).unwrap();
    assert!((c.score - 2.0 / 3.0).abs() < 1e-12, "{c:?}");
    assert!(prompt_consistency(&s.image, &[0, 3, 3], &DetectorConfig::default()).is_err());
}

#[test]
fn blank_image_scores_at_most_one_third() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let blank = LatentGrid::filled(GridShape::new(32, 32, 3), 0.0f32);
    let gray = LatentGrid::filled(GridShape::new(32, 32, 3), 0.5f32);
    for _ in 0..100 {
        let (caption, _) = sample_caption(&mut rng);
        for img in [&blank, &gray] {
            assert!(prompt_consistency(img, &caption, &DetectorConfig::default()).unwrap().score <= 1.0 / 3.0);
        }
    }
}

#[test]
fn embedder_separates_held_out_identities() {
    let world = generate_world(WorldConfig::default(), 0).unwrap();
    let cfg = EmbedderConfig { steps: 800, ..EmbedderConfig::default() };
    let (e, _) = IdentityEmbedder::train(world.pool(Split::Train), &cfg).unwrap();
    let (same, cross) = separation_margin(&e, world.pool(Split::Heldout), 4, 9).unwrap();
    assert!(same - cross >= 0.3, "same {same} cross {cross}");

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = render_identity_crop(&world.identities[70], Style::Striped, Hue::Blue, 0.1, 0.05, &mut rng);
    let b = render_identity_crop(&world.identities[71], Style::Plain, Hue::Red, 0.1, 0.05, &mut rng);
    assert_eq!(identity_similarity(&e, &a, &a).unwrap(), 1.0);
    assert_eq!(identity_similarity(&e, &a, &b).unwrap(), identity_similarity(&e, &b, &a).unwrap());

    // Detections of a rendered scene against its own segments.
    let s = world.scene(Split::Heldout, 3).unwrap();
    let dets = detect_subjects(&s.image, &DetectorConfig::default());
    let refs: Vec<_> = s.segments.iter().map(|g| masked_crop(&s.image, &s.segment_mask(g.id), &g.bbox)).collect();
    let score = multi_subject_identity_score(&e, &refs, &dets).unwrap();
    assert!(score.score > 0.99, "{score:?}");
    let none = multi_subject_identity_score(&e, &refs, &[]).unwrap();
    assert_eq!(none.score, 0.0);
    assert!(multi_subject_identity_score(&e, &[], &dets).is_err());
}
