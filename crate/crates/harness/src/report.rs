//! Campaign summaries: statistics over the CSVs of an output directory and
//! simple PNG charts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use glyphcomp_eval::{read_campaign_csv, CampaignRow};
use glyphcomp_world::io::{encode_png, write_file, PngColor};

use crate::error::{HarnessError, Result};
use crate::experiments::{ABLATION_CSV, BASELINE_CSV, SWEEP_CSV};

pub const SUMMARY_TXT: &str = "summary.txt";

/// Ranks starting at 1; ties get the mean of the ranks they span.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation; `None` when either side is constant or there
/// are fewer than two points.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    pearson(&ranks(x), &ranks(y))
}

pub fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Seed-averaged value of `f` for each distinct alpha, in ascending alpha.
pub fn per_alpha_means(rows: &[CampaignRow], f: impl Fn(&CampaignRow) -> Option<f64>) -> Vec<(f64, f64)> {
    let mut alphas: Vec<f64> = rows.iter().map(|r| r.alpha).collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    alphas.into_iter().filter_map(|a| mean(rows.iter().filter(|r| r.alpha == a).filter_map(&f)).map(|m| (a, m))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationStats {
    pub seeds: usize,
    pub identity_off: f64,
    pub identity_on: f64,
    pub iou_off: Option<f64>,
    pub iou_on: Option<f64>,
}

pub fn ablation_stats(rows: &[CampaignRow]) -> AblationStats {
    let arm = |on: bool| rows.iter().filter(move |r| r.lambda_on == on);
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    AblationStats {
        seeds: seeds.len(),
        identity_off: mean(arm(false).map(|r| r.identity_preservation)).unwrap_or(0.0),
        identity_on: mean(arm(true).map(|r| r.identity_preservation)).unwrap_or(0.0),
        iou_off: mean(arm(false).filter_map(|r| r.attention_iou)),
        iou_on: mean(arm(true).filter_map(|r| r.attention_iou)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepStats {
    pub seeds: usize,
    pub identity: Vec<(f64, f64)>,
    pub prompt: Vec<(f64, f64)>,
    pub rho_identity: Option<f64>,
    pub rho_prompt: Option<f64>,
}

/// Correlations are computed on the seed-averaged curve.
pub fn sweep_stats(rows: &[CampaignRow]) -> SweepStats {
    let identity = per_alpha_means(rows, |r| Some(r.identity_preservation));
    let prompt = per_alpha_means(rows, |r| Some(r.prompt_consistency));
    let split = |v: &[(f64, f64)]| -> (Vec<f64>, Vec<f64>) { v.iter().copied().unzip() };
    let (a, i) = split(&identity);
    let (b, p) = split(&prompt);
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    SweepStats { seeds: seeds.len(), rho_identity: spearman(&a, &i), rho_prompt: spearman(&b, &p), identity, prompt }
}

/// RGB raster for line charts.
struct Chart {
    w: usize,
    h: usize,
    px: Vec<u8>,
}

const MARGIN: usize = 20;

impl Chart {
    fn new(w: usize, h: usize) -> Chart {
        let mut c = Chart { w, h, px: vec![255; w * h * 3] };
        let (x0, y0, x1, y1) = (MARGIN, h - MARGIN, w - MARGIN, MARGIN);
        c.line(x0 as f64, y0 as f64, x1 as f64, y0 as f64, [0, 0, 0]);
        c.line(x0 as f64, y0 as f64, x0 as f64, y1 as f64, [0, 0, 0]);
        for k in 1..=4 {
            let y = y0 as f64 - (y0 - y1) as f64 * k as f64 / 4.0;
            for x in (x0..x1).step_by(4) {
                c.dot(x as f64, y, [200, 200, 200]);
            }
        }
        c
    }

    fn dot(&mut self, x: f64, y: f64, rgb: [u8; 3]) {
        let (x, y) = (x.round(), y.round());
        if x >= 0.0 && y >= 0.0 && (x as usize) < self.w && (y as usize) < self.h {
            let i = (y as usize * self.w + x as usize) * 3;
            self.px[i..i + 3].copy_from_slice(&rgb);
        }
    }

    fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, rgb: [u8; 3]) {
        let n = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
        for k in 0..=n {
            let t = k as f64 / n as f64;
            self.dot(x0 + t * (x1 - x0), y0 + t * (y1 - y0), rgb);
        }
    }

    /// Maps `x` and `y` in `[0, 1]` to the plot area.
    fn to_px(&self, x: f64, y: f64) -> (f64, f64) {
        let (pw, ph) = ((self.w - 2 * MARGIN) as f64, (self.h - 2 * MARGIN) as f64);
        (MARGIN as f64 + x.clamp(0.0, 1.0) * pw, (self.h - MARGIN) as f64 - y.clamp(0.0, 1.0) * ph)
    }

    fn series(&mut self, pts: &[(f64, f64)], rgb: [u8; 3]) {
        let p: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| self.to_px(x, y)).collect();
        for w in p.windows(2) {
            self.line(w[0].0, w[0].1, w[1].0, w[1].1, rgb);
        }
        for &(x, y) in &p {
            for d in -2..=2 {
                self.dot(x + d as f64, y, rgb);
                self.dot(x, y + d as f64, rgb);
            }
        }
    }

    fn bar(&mut self, x: f64, width: f64, y: f64, rgb: [u8; 3]) {
        let (a, top) = self.to_px(x, y);
        let (b, bottom) = self.to_px(x + width, 0.0);
        let mut yy = top;
        while yy <= bottom {
            self.line(a, yy, b, yy, rgb);
            yy += 1.0;
        }
    }

    fn png(&self, hash: &str, title: &str) -> Vec<u8> {
        encode_png(self.w, self.h, PngColor::Rgb, &self.px, &[("config_hash", hash), ("Title", title)])
    }
}

const BLUE: [u8; 3] = [31, 119, 180];
const ORANGE: [u8; 3] = [255, 127, 14];

/// Writes `summary.txt` and the charts for whatever campaign CSVs exist in
/// `dir`. Returns the summary text, or `None` when there is nothing to report.
pub fn report(dir: &Path) -> Result<Option<String>> {
    let load = |name: &str| -> Result<Option<(Option<String>, Vec<CampaignRow>)>> {
        let p = dir.join(name);
        if p.exists() {
            Ok(Some(read_campaign_csv(&p)?))
        } else {
            Ok(None)
        }
    };
    let ablation = load(ABLATION_CSV)?;
    let baseline = load(BASELINE_CSV)?;
    let sweep = load(SWEEP_CSV)?;
    if ablation.is_none() && sweep.is_none() && baseline.is_none() {
        return Ok(None);
    }
    let mut s = String::new();
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    if let Some((hash, rows)) = &ablation {
        let hash = hash.as_deref().unwrap_or("unknown");
        let a = ablation_stats(rows);
        writeln!(s, "[localization ablation] config {hash}, {} seeds", a.seeds).unwrap();
        writeln!(s, "identity preservation: off {:.4}, on {:.4}, difference {:+.4}", a.identity_off, a.identity_on, a.identity_on - a.identity_off).unwrap();
        let diff = a.iou_on.zip(a.iou_off).map(|(x, y)| x - y);
        writeln!(s, "attention IoU: off {}, on {}, difference {}", fmt(a.iou_off), fmt(a.iou_on), fmt(diff)).unwrap();
        let mut c = Chart::new(240, 200);
        let vals = [a.identity_off, a.identity_on, a.iou_off.unwrap_or(0.0), a.iou_on.unwrap_or(0.0)];
        for (k, v) in vals.iter().enumerate() {
            c.bar(0.05 + 0.24 * k as f64, 0.18, *v, if k % 2 == 0 { BLUE } else { ORANGE });
        }
        write_file(&dir.join("ablation.png"), &c.png(hash, "identity (left pair) and attention IoU (right pair); blue off, orange on"))?;
    }
    if let Some((hash, rows)) = &baseline {
        let p = mean(rows.iter().map(|r| r.prompt_consistency));
        writeln!(s, "[untrained baseline] config {}, prompt consistency {}", hash.as_deref().unwrap_or("unknown"), fmt(p)).unwrap();
        if let Some((_, ab)) = &ablation {
            let on = mean(ab.iter().filter(|r| r.lambda_on).map(|r| r.prompt_consistency));
            writeln!(s, "trained prompt consistency {}, gain {}", fmt(on), fmt(on.zip(p).map(|(a, b)| a - b))).unwrap();
        }
    }
    if let Some((hash, rows)) = &sweep {
        let hash = hash.as_deref().unwrap_or("unknown");
        let st = sweep_stats(rows);
        writeln!(s, "[alpha sweep] config {hash}, {} seeds", st.seeds).unwrap();
        for ((a, i), (_, p)) in st.identity.iter().zip(&st.prompt) {
            writeln!(s, "alpha {a:.2}: identity {i:.4}, prompt consistency {p:.4}").unwrap();
        }
        writeln!(s, "spearman(alpha, identity) {}, spearman(alpha, prompt) {}", fmt(st.rho_identity), fmt(st.rho_prompt)).unwrap();
        let mut c = Chart::new(320, 240);
        c.series(&st.identity, BLUE);
        c.series(&st.prompt, ORANGE);
        write_file(&dir.join("alpha_sweep.png"), &c.png(hash, "alpha (x) vs identity (blue) and prompt consistency (orange)"))?;
    }
    let path = dir.join(SUMMARY_TXT);
    fs::write(&path, &s).map_err(|e| HarnessError::io(&path, e))?;
    Ok(Some(s))
}
