//! One PASS/FAIL line per acceptance criterion.
//!
//! Criteria 1 to 6 are computed here. Criteria 7 to 10 need the full
//! multi-seed campaigns, which take hours; they are read from two
//! independent campaign runs stored under `results/run_a` and
//! `results/run_b` (override the root with `GLYPHCOMP_RESULTS`). See the
//! README for the commands that produce them.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use glyphcomp::experiments::{CampaignTime, ABLATION_CSV, ABLATION_TIME, BASELINE_CSV, SWEEP_CSV, SWEEP_TIME};
use glyphcomp::report::{ablation_stats, mean, sweep_stats};
use glyphcomp::training::TrainSummary;
use glyphcomp_core::{
    balanced_l1, forward_diffuse, loss_and_grads, make_schedule, sample, ComposerModel, ConditionMode, GridShape, LatentGrid,
    ModelConfig, ParamStore, SamplerConfig, SegmentationMask, SubjectRef, TrainingItem,
};
use glyphcomp_eval::{detect_subjects, masked_crop, multi_subject_identity_score, read_campaign_csv, DetectorConfig, EmbedderConfig, IdentityEmbedder};
use glyphcomp_world::{generate_world, greedy_match, Split, WorldConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn grid(rng: &mut ChaCha8Rng, s: GridShape, lo: f64, hi: f64) -> LatentGrid<f64> {
    LatentGrid::from_vec(s, (0..s.len()).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn tiny_batch(model: &ComposerModel<f64>, rng: &mut ChaCha8Rng) -> Vec<TrainingItem<f64>> {
    let shape = model.cfg.image;
    let crop = GridShape::new(model.cfg.crop_size, model.cfg.crop_size, 3);
    let m1 = SegmentationMask::from_fn(8, 8, |y, x| y < 4 && x < 4);
    let m2 = SegmentationMask::from_fn(8, 8, |y, x| y >= 4 && (2..6).contains(&x));
    let s1 = SubjectRef { crop: grid(rng, crop, 0.0, 1.0), identity: Some(1), mask: m1.clone(), token_index: 2 };
    let s2 = SubjectRef { crop: grid(rng, crop, 0.0, 1.0), identity: Some(2), mask: m2, token_index: 5 };
    let tokens = vec![1, 3, 4, 6, 3, 4, 7, 2];
    let mut item = |mode, subjects: Vec<SubjectRef<f64>>, region: Option<SegmentationMask>, t| TrainingItem {
        z0: grid(rng, shape, -1.0, 1.0),
        tokens: tokens.clone(),
        subjects,
        mode,
        region,
        t,
        noise: grid(rng, shape, -1.5, 1.5),
    };
    vec![
        item(ConditionMode::Full, vec![s1.clone(), s2.clone()], None, 3),
        item(ConditionMode::Full, vec![s2], Some(m1), 7),
        item(ConditionMode::TextOnly, vec![s1.clone()], None, 1),
        item(ConditionMode::Unconditional, vec![s1], None, 10),
    ]
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let model = ComposerModel::<f64>::new(ModelConfig::tiny(10), 21).unwrap();
    let schedule = make_schedule(10, 1e-3, 0.2).unwrap();
    let batch = tiny_batch(&model, &mut ChaCha8Rng::seed_from_u64(22));
    let lambda = 0.5;
    let analytic = loss_and_grads(&model, &batch, &schedule, lambda).unwrap().grads;
    let loss = |p: &ParamStore<f64>| {
        let mut m = model.clone();
        m.params = p.clone();
        loss_and_grads(&m, &batch, &schedule, lambda).unwrap().loss.total
    };
    let mut params = model.params.clone();
    let h = 1e-5;
    let (mut worst, mut checked) = (0.0f64, 0usize);
    for ti in 0..params.len() {
        if !params.tensors()[ti].trainable {
            continue;
        }
        for j in 0..params.tensors()[ti].data.len() {
            let orig = params.tensors()[ti].data[j];
            params.tensors_mut()[ti].data[j] = orig + h;
            let lp = loss(&params);
            params.tensors_mut()[ti].data[j] = orig - h;
            let lm = loss(&params);
            params.tensors_mut()[ti].data[j] = orig;
            let num = (lp - lm) / (2.0 * h);
            let ana = analytic.by_index(ti)[j];
            worst = worst.max((ana - num).abs() / ana.abs().max(num.abs()).max(1e-6));
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-4 && secs <= 120.0, format!("max rel err {worst:.2e} over {checked} parameters in {secs:.1}s"))
}

fn criterion_2() -> Outcome {
    let m = SegmentationMask { height: 2, width: 2, bits: vec![false, true, false, true] };
    let indicator: Vec<f64> = m.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let a: f64 = balanced_l1(&indicator, &m).unwrap();
    let b: f64 = balanced_l1(&[0.25f64; 4], &m).unwrap();
    let c: f64 = balanced_l1(&[0.1f64, 0.9, 0.3, 0.7], &m).unwrap();
    let ok = (a + 1.0).abs() <= 1e-12 && b.abs() <= 1e-12 && (c + 0.6).abs() <= 1e-12;
    outcome(ok, format!("indicator {a}, uniform {b}, hand case {c}"))
}

fn criterion_3() -> Outcome {
    let mut cfg = ModelConfig { vocab_size: glyphcomp_world::VOCAB_SIZE, ..ModelConfig::default() };
    cfg.image = GridShape::new(32, 32, 3);
    let model = ComposerModel::<f64>::new(cfg, 4).unwrap();
    let schedule = make_schedule(100, 1e-4, 0.02).unwrap();
    let world = generate_world(WorldConfig::default(), 0).unwrap();
    let scene = world.scene(Split::Heldout, 0).unwrap();
    let s = glyphcomp_world::scene_to_sample(&scene, 0.0, 1).unwrap();
    let subjects: Vec<SubjectRef<f64>> =
        s.subjects.iter().map(|r| SubjectRef { crop: r.crop.cast(), identity: r.identity, mask: r.mask.clone(), token_index: r.token_index }).collect();
    let out = sample(&model, &schedule, &s.tokens, &subjects, &SamplerConfig::default(), 9, true).unwrap();
    let (mut worst, mut rows) = (0.0f64, 0usize);
    for step in &out.trace {
        for rec in &step.attention {
            for r in 0..rec.map.rows {
                worst = worst.max((rec.map.row(r).iter().sum::<f64>() - 1.0).abs());
                rows += 1;
            }
        }
    }
    outcome(worst <= 1e-6 && rows > 0, format!("{} steps, {rows} rows, max |sum - 1| {worst:.2e}", out.trace.len()))
}

fn criterion_4() -> Outcome {
    let schedule = make_schedule(100, 1e-4, 0.02).unwrap();
    let shape = GridShape::new(4, 4, 3);
    let z0 = LatentGrid::filled(shape, 0.8f64);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = (0.0f64, 0.0f64);
    for t in [1usize, 50, 100] {
        let ab = schedule.alpha_bar(t);
        let (mut s1, mut s2, mut n) = (0.0, 0.0, 0.0);
        for _ in 0..10_000 {
            let eps = LatentGrid::from_vec(shape, (0..shape.len()).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
            let z = forward_diffuse(&z0, t, &eps, &schedule).unwrap();
            for v in z.data {
                s1 += v;
                s2 += v * v;
                n += 1.0;
            }
        }
        let m = s1 / n;
        let var = s2 / n - m * m;
        worst.0 = worst.0.max((m / (ab.sqrt() * 0.8) - 1.0).abs());
        worst.1 = worst.1.max((var / (1.0 - ab) - 1.0).abs());
    }
    outcome(worst.0 <= 0.01 && worst.1 <= 0.02, format!("t in {{1, 50, 100}}: worst mean rel err {:.4}, variance {:.4}", worst.0, worst.1))
}

/// Ancestral sampling with the conditional prediction only.
fn conditional_only(model: &ComposerModel<f32>, schedule: &glyphcomp_core::NoiseSchedule, cond: &glyphcomp_core::Mat<f32>, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |n: usize| -> Vec<f32> {
        (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            })
            .collect()
    };
    let shape = model.cfg.image;
    let mut z = LatentGrid::from_vec(shape, normal(shape.len())).unwrap();
    for t in (1..=schedule.steps()).rev() {
        let eps = model.denoise(&z, t, cond).unwrap().0.eps_hat;
        let ab = schedule.alpha_bar(t);
        let ab_prev = if t > 1 { schedule.alpha_bar(t - 1) } else { 1.0 };
        let beta = schedule.beta(t);
        let c1 = (ab_prev.sqrt() * beta / (1.0 - ab)) as f32;
        let c2 = (schedule.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab)) as f32;
        let (sa, sb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let sigma = ((beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt()) as f32;
        let noise = if t > 1 { Some(normal(shape.len())) } else { None };
        for i in 0..z.data.len() {
            let x0 = ((z.data[i] - sb * eps.data[i]) / sa).clamp(-1.0, 1.0);
            let mut v = c1 * x0 + c2 * z.data[i];
            if let Some(n) = &noise {
                v += sigma * n[i];
            }
            z.data[i] = v;
        }
    }
    z.data.iter().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect()
}

fn criterion_5() -> Outcome {
    let cfg = ModelConfig { vocab_size: glyphcomp_world::VOCAB_SIZE, ..ModelConfig::default() };
    let model = ComposerModel::<f32>::new(cfg, 5).unwrap();
    let schedule = make_schedule(100, 1e-4, 0.02).unwrap();
    let world = generate_world(WorldConfig::default(), 0).unwrap();
    let scene = world.scene(Split::Heldout, 3).unwrap();
    let s = glyphcomp_world::scene_to_sample(&scene, 0.0, 2).unwrap();
    let base = SamplerConfig::default();

    let with = sample(&model, &schedule, &s.tokens, &s.subjects, &SamplerConfig { alpha: 0.0, ..base }, 11, false).unwrap();
    let text_only = sample(&model, &schedule, &s.tokens, &[], &SamplerConfig { alpha: 0.0, ..base }, 11, false).unwrap();
    let alpha0 = with.image.data == text_only.image.data;

    let aug = model.augmented(&s.tokens, &s.subjects).unwrap().rows;
    let g1 = sample(&model, &schedule, &s.tokens, &s.subjects, &SamplerConfig { guidance: 1.0, alpha: 1.0, ..base }, 12, false).unwrap();
    let guided1 = g1.image.data == conditional_only(&model, &schedule, &aug, 12);

    let mut trace_ok = true;
    for alpha in [0.0, 0.25, 0.7, 1.0] {
        let out = sample(&model, &schedule, &s.tokens, &s.subjects, &SamplerConfig { alpha, guidance: 1.0, ..base }, 13, false).unwrap();
        trace_ok &= out.trace.iter().all(|st| st.augmented == !(st.t as f64 > alpha * 100.0));
        trace_ok &= out.trace.len() == 100;
    }
    outcome(alpha0 && guided1 && trace_ok, format!("alpha=0 identical to text-only: {alpha0}, g=1 identical to conditional-only: {guided1}, trace follows t > alpha T: {trace_ok}"))
}

fn reference_greedy(scores: &[Vec<f64>], threshold: f64) -> Vec<(usize, usize)> {
    let mut cand: Vec<(f64, usize, usize)> =
        scores.iter().enumerate().flat_map(|(i, r)| r.iter().enumerate().map(move |(j, &s)| (s, i, j))).collect();
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut ti, mut tj, mut out) = (Vec::new(), Vec::new(), Vec::new());
    for (s, i, j) in cand {
        if s < threshold {
            break;
        }
        if !ti.contains(&i) && !tj.contains(&j) {
            ti.push(i);
            tj.push(j);
            out.push((i, j));
        }
    }
    out
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut match_ok = 0;
    for _ in 0..1000 {
        let (n, m) = (rng.random_range(0..6), rng.random_range(0..6));
        let img: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| (rng.random_range(0..5) as f64) / 4.0).collect()).collect();
        let lab: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| if rng.random::<bool>() { 1.0 } else { 0.1 }).collect()).collect();
        let threshold = if rng.random::<bool>() { 0.0 } else { 0.2 };
        let phrases: Vec<usize> = (0..n).collect();
        let segs: Vec<usize> = (0..m).collect();
        let got = greedy_match(&phrases, &segs, |&p, &g| img[p][g], |&p, &g| lab[p][g], threshold);
        let product: Vec<Vec<f64>> = (0..n).map(|i| (0..m).map(|j| img[i][j] * lab[i][j]).collect()).collect();
        let pairs: Vec<(usize, usize)> = got.pairs.iter().map(|p| (p.phrase, p.segment)).collect();
        match_ok += (pairs == reference_greedy(&product, threshold)) as usize;
    }

    let world = generate_world(WorldConfig::default(), 0).unwrap();
    let cfg = EmbedderConfig { steps: 150, ..EmbedderConfig::default() };
    let (embedder, _) = IdentityEmbedder::train(&world.identities, &cfg).unwrap();
    let mut score_ok = 0;
    for i in 0..1000u64 {
        let a = world.scene(Split::Heldout, i).unwrap();
        let b = world.scene(Split::Train, i).unwrap();
        let refs: Vec<LatentGrid<f32>> = a.segments.iter().map(|s| masked_crop(&a.image, &a.segment_mask(s.id), &s.bbox)).collect();
        let dets = detect_subjects(&b.image, &DetectorConfig::default());
        let got = multi_subject_identity_score(&embedder, &refs, &dets).unwrap();
        let emb = |c: &LatentGrid<f32>| embedder.embed(c).unwrap();
        let cos = |x: &[f64], y: &[f64]| {
            let d: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            d / (x.iter().map(|v| v * v).sum::<f64>() * y.iter().map(|v| v * v).sum::<f64>()).sqrt()
        };
        let re: Vec<Vec<f64>> = refs.iter().map(emb).collect();
        let de: Vec<Vec<f64>> = dets.iter().map(|d| emb(&d.crop)).collect();
        let sims: Vec<Vec<f64>> = re.iter().map(|r| de.iter().map(|d| cos(r, d)).collect()).collect();
        let mut per = vec![0.0; refs.len()];
        for (i, j) in reference_greedy(&sims, 0.0) {
            per[i] = sims[i][j];
        }
        let expected = per.iter().copied().fold(f64::INFINITY, f64::min);
        score_ok += ((got.score - expected).abs() <= 1e-12) as usize;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(match_ok == 1000 && score_ok == 1000 && secs <= 60.0, format!("greedy_match {match_ok}/1000, identity score {score_ok}/1000, {secs:.1}s"))
}

fn results_root() -> PathBuf {
    std::env::var_os("GLYPHCOMP_RESULTS").map(PathBuf::from).unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../results"))
}

fn read_time(path: &Path) -> Option<f64> {
    let t: CampaignTime = serde_json::from_str(&fs::read_to_string(path).ok()?).ok()?;
    Some(t.seconds)
}

fn criterion_7(run: &Path) -> Outcome {
    let Ok((_, rows)) = read_campaign_csv(&run.join(ABLATION_CSV)) else {
        return outcome(false, format!("no ablation results in {}", run.display()));
    };
    let a = ablation_stats(&rows);
    let hours = read_time(&run.join(ABLATION_TIME)).map(|s| s / 3600.0);
    let diff = a.iou_on.zip(a.iou_off).map(|(x, y)| x - y);
    let ok = a.seeds >= 3 && a.identity_on > a.identity_off && diff.is_some_and(|d| d >= 0.10) && hours.is_some_and(|h| h <= 2.0);
    outcome(
        ok,
        format!(
            "{} seeds, identity off {:.4} on {:.4}, IoU gain {}, runtime {}",
            a.seeds,
            a.identity_off,
            a.identity_on,
            diff.map_or("n/a".into(), |d| format!("{d:+.4}")),
            hours.map_or("unknown".into(), |h| format!("{h:.2}h"))
        ),
    )
}

fn criterion_8(run: &Path) -> Outcome {
    let Ok((_, rows)) = read_campaign_csv(&run.join(SWEEP_CSV)) else {
        return outcome(false, format!("no sweep results in {}", run.display()));
    };
    let s = sweep_stats(&rows);
    let grid = s.identity.len();
    let full = s.identity.first().is_some_and(|p| p.0 == 0.0) && s.identity.last().is_some_and(|p| p.0 == 1.0);
    let ok = s.seeds >= 3 && full && s.rho_identity.is_some_and(|r| r >= 0.8) && s.rho_prompt.is_some_and(|r| r <= -0.8);
    outcome(ok, format!("{} seeds, {grid} alphas, spearman identity {:?}, prompt {:?}", s.seeds, s.rho_identity, s.rho_prompt))
}

fn criterion_9(run: &Path) -> Outcome {
    let path = run.join("seed_0/lambda_on/train_summary.json");
    let Some(t) = fs::read_to_string(&path).ok().and_then(|s| serde_json::from_str::<TrainSummary>(&s).ok()) else {
        return outcome(false, format!("no training summary at {}", path.display()));
    };
    let drop = 1.0 - t.val_noise_final / t.val_noise_initial;
    let trained = read_campaign_csv(&run.join(ABLATION_CSV)).ok().and_then(|(_, r)| mean(r.iter().filter(|r| r.lambda_on && r.alpha == 0.7).map(|r| r.prompt_consistency)));
    let base = read_campaign_csv(&run.join(BASELINE_CSV)).ok().and_then(|(_, r)| mean(r.iter().filter(|r| r.alpha == 0.7).map(|r| r.prompt_consistency)));
    let gain = trained.zip(base).map(|(a, b)| a - b);
    let timed = t.resumed_from == 0 && t.seconds <= 1800.0;
    let ok = t.steps == 20_000 && timed && drop >= 0.5 && gain.is_some_and(|g| g >= 0.2);
    outcome(
        ok,
        format!(
            "{} steps in {:.1} min (from step {}), noise loss {:.4} -> {:.4} ({:.0}% drop), prompt consistency gain {}",
            t.steps,
            t.seconds / 60.0,
            t.resumed_from,
            t.val_noise_initial,
            t.val_noise_final,
            100.0 * drop,
            gain.map_or("n/a".into(), |g| format!("{g:+.4}"))
        ),
    )
}

fn criterion_10(a: &Path, b: &Path) -> Outcome {
    let mut same = Vec::new();
    for name in [ABLATION_CSV, BASELINE_CSV, SWEEP_CSV] {
        match (fs::read(a.join(name)), fs::read(b.join(name))) {
            (Ok(x), Ok(y)) => same.push(x == y),
            _ => return outcome(false, format!("{name} missing from one of the runs")),
        }
    }
    let sweep_time = read_time(&a.join(SWEEP_TIME));
    outcome(same.iter().all(|&s| s), format!("identical: ablation {}, baseline {}, sweep {} (sweep took {:?}s)", same[0], same[1], same[2], sweep_time.map(|s| s.round())))
}

#[test]
fn acceptance() {
    let root = results_root();
    let (a, b) = (root.join("run_a"), root.join("run_b"));
    let results: Vec<(usize, Outcome)> = vec![
        (1, criterion_1()),
        (2, criterion_2()),
        (3, criterion_3()),
        (4, criterion_4()),
        (5, criterion_5()),
        (6, criterion_6()),
        (7, criterion_7(&a)),
        (8, criterion_8(&a)),
        (9, criterion_9(&a)),
        (10, criterion_10(&a, &b)),
    ];
    // Written to the raw handle so the lines show without --nocapture.
    let mut out = std::io::stdout().lock();
    for (n, o) in &results {
        writeln!(out, "criterion {n:>2}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail).unwrap();
    }
    drop(out);
    // 7 to 10 report on stored campaign results and may fail honestly.
    for (n, o) in results.iter().take(6) {
        assert!(o.pass, "criterion {n} failed: {}", o.detail);
    }
}
