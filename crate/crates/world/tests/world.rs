use glyphcomp_world::matching::greedy_assign;
use glyphcomp_world::{generate_world, greedy_match, Split, WorldConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sorts every candidate once and accepts pairs in order.
fn reference_greedy(scores: &[Vec<f64>], threshold: f64) -> Vec<(usize, usize)> {
    let mut cand = Vec::new();
    for (i, row) in scores.iter().enumerate() {
        for (j, &s) in row.iter().enumerate() {
            cand.push((s, i, j));
        }
    }
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut taken_i = Vec::new();
    let mut taken_j = Vec::new();
    let mut out = Vec::new();
    for (s, i, j) in cand {
        if taken_i.contains(&i) || taken_j.contains(&j) {
            continue;
        }
        if s < threshold {
            break;
        }
        taken_i.push(i);
        taken_j.push(j);
        out.push((i, j));
    }
    out
}

fn random_scores(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, usize) {
    let rows = rng.random_range(0..=6);
    let cols = rng.random_range(0..=6);
    // coarse values so ties are common
    let coarse = rng.random_bool(0.5);
    let scores = (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| if coarse { rng.random_range(0..5) as f64 / 4.0 } else { rng.random::<f64>() })
                .collect()
        })
        .collect();
    (scores, cols)
}

#[test]
fn greedy_match_agrees_with_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let (scores, cols) = random_scores(&mut rng);
        let threshold = if rng.random_bool(0.5) { 0.0 } else { rng.random::<f64>() };
        let phrases: Vec<usize> = (0..scores.len()).collect();
        let segments: Vec<usize> = (0..cols).collect();
        let m = greedy_match(
            &phrases,
            &segments,
            |&p, &g| scores[p][g].sqrt(),
            |&p, &g| scores[p][g].sqrt(),
            threshold,
        );
        let got: Vec<(usize, usize)> = m.pairs.iter().map(|p| (p.phrase, p.segment)).collect();
        let squared: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|s| s.sqrt() * s.sqrt()).collect()).collect();
        assert_eq!(got, reference_greedy(&squared, threshold), "{scores:?} t={threshold}");
    }
}

#[test]
fn subject_count_histogram() {
    let cfg = WorldConfig::default();
    let world = generate_world(cfg.clone(), 7).unwrap();
    let n = 1000;
    let mut counts = vec![0usize; cfg.max_subjects()];
    for i in 0..n {
        counts[world.scene(Split::Train, i).unwrap().segments.len() - 1] += 1;
    }
    let total: f64 = cfg.count_weights.iter().sum();
    for (k, &c) in counts.iter().enumerate() {
        let p = cfg.count_weights[k] / total;
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((c as f64 - mean).abs() <= 3.0 * sd, "count {} seen {c}, expected {mean:.1} ± {:.1}", k + 1, 3.0 * sd);
    }
}

#[test]
fn held_out_scenes_use_held_out_identities() {
    let world = generate_world(WorldConfig::default(), 3).unwrap();
    let train: Vec<u32> = world.pool(Split::Train).iter().map(|g| g.id).collect();
    for i in 0..50 {
        for s in world.scene(Split::Heldout, i).unwrap().segments {
            assert!(!train.contains(&s.identity));
        }
    }
}

proptest! {
    #[test]
    fn greedy_is_injective_and_non_increasing(seed in any::<u64>(), threshold in 0.0f64..1.0) {
        let (scores, cols) = random_scores(&mut ChaCha8Rng::seed_from_u64(seed));
        let pairs = greedy_assign(&scores, cols, threshold);
        let mut rows: Vec<usize> = pairs.iter().map(|p| p.phrase).collect();
        let mut segs: Vec<usize> = pairs.iter().map(|p| p.segment).collect();
        rows.sort();
        rows.dedup();
        segs.sort();
        segs.dedup();
        prop_assert_eq!(rows.len(), pairs.len());
        prop_assert_eq!(segs.len(), pairs.len());
        for w in pairs.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
        for p in &pairs {
            prop_assert!(p.score >= threshold);
        }
    }
}
