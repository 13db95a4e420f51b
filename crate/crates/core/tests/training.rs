use glyphcomp_core::{
    forward_diffuse, make_schedule, noise_loss, training_step, Adam, AdamConfig, ConditionMode, GridShape, LatentGrid,
    Model64, ModelConfig, SegmentationMask, SubjectRef, TrainingItem,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn items(n: usize, seed: u64) -> Vec<TrainingItem<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = GridShape::new(8, 8, 3);
    (0..n)
        .map(|i| {
            let z0 = LatentGrid::from_vec(shape, (0..shape.len()).map(|k| if (k / 3) % 8 < 4 { 0.8 } else { -0.6 }).collect()).unwrap();
            let noise = LatentGrid::from_vec(shape, (0..shape.len()).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
            let mask = SegmentationMask::from_fn(8, 8, |y, x| (2..6).contains(&y) && (1..4).contains(&x));
            let crop = LatentGrid::from_vec(GridShape::new(4, 4, 3), (0..48).map(|k| (k % 7) as f64 / 7.0).collect()).unwrap();
            TrainingItem {
                z0,
                tokens: vec![1, 2, 3],
                subjects: vec![SubjectRef { crop, identity: Some(0), mask: mask.clone(), token_index: 2 }],
                mode: ConditionMode::Full,
                region: (i % 2 == 1).then_some(mask),
                t: 1 + i % 4,
                noise,
            }
        })
        .collect()
}

#[test]
fn perfect_prediction_has_zero_noise_loss() {
    let s = make_schedule(4, 0.1, 0.3).unwrap();
    let it = &items(1, 1)[0];
    let zt = forward_diffuse(&it.z0, 2, &it.noise, &s).unwrap();
    assert_eq!(zt.shape, it.z0.shape);
    let (l, _) = noise_loss(&it.noise, &it.noise, None).unwrap();
    assert_eq!(l, 0.0);
}

#[test]
fn repeated_steps_fit_a_fixed_batch() {
    let schedule = make_schedule(4, 0.1, 0.3).unwrap();
    let mut model = Model64::new(ModelConfig::tiny(8), 2).unwrap();
    let mut opt = Adam::new(AdamConfig { lr: 1e-2, ..AdamConfig::default() }, &model.params);
    let batch = items(4, 3);
    let first = training_step(&mut model, &mut opt, &batch, &schedule, 0.001, Some(1.0), 1).unwrap().loss.noise;
    let mut last = first;
    for step in 2..=300 {
        last = training_step(&mut model, &mut opt, &batch, &schedule, 0.001, Some(1.0), step).unwrap().loss.noise;
    }
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn training_is_deterministic() {
    let schedule = make_schedule(4, 0.1, 0.3).unwrap();
    let run = || {
        let mut model = Model64::new(ModelConfig::tiny(8), 5).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &model.params);
        for step in 1..=5 {
            training_step(&mut model, &mut opt, &items(2, step), &schedule, 0.001, None, step).unwrap();
        }
        model.params
    };
    assert_eq!(run(), run());
}
