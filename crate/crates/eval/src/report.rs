//! Per-image metric records and the campaign CSV.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EvalError, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const CAMPAIGN_COLUMNS: [&str; 6] = ["seed", "alpha", "lambda_on", "identity_preservation", "prompt_consistency", "attention_iou"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub alpha: f64,
    pub lambda: f64,
    pub image: String,
    pub caption: String,
    /// Minimum of `per_subject_similarities` (0 when there are none).
    pub identity_preservation: f64,
    pub per_subject_similarities: Vec<f64>,
    pub prompt_consistency: f64,
    pub attention_iou: Option<f64>,
}

impl MetricsReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config_hash: &str,
        seed: u64,
        alpha: f64,
        lambda: f64,
        image: String,
        caption: String,
        per_subject_similarities: Vec<f64>,
        prompt_consistency: f64,
        attention_iou: Option<f64>,
    ) -> Self {
        let identity_preservation =
            if per_subject_similarities.is_empty() { 0.0 } else { per_subject_similarities.iter().copied().fold(f64::INFINITY, f64::min) };
        MetricsReport {
            schema_version: REPORT_SCHEMA_VERSION,
            config_hash: config_hash.to_string(),
            seed,
            alpha,
            lambda,
            image,
            caption,
            identity_preservation,
            per_subject_similarities,
            prompt_consistency,
            attention_iou,
        }
    }
}

/// One aggregated model/setting row of a campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignRow {
    pub seed: u64,
    pub alpha: f64,
    pub lambda_on: bool,
    pub identity_preservation: f64,
    pub prompt_consistency: f64,
    pub attention_iou: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl CampaignRow {
    /// Averages per-image reports; attention IoU over the reports that have one.
    pub fn aggregate(seed: u64, alpha: f64, lambda_on: bool, reports: &[MetricsReport]) -> CampaignRow {
        CampaignRow {
            seed,
            alpha,
            lambda_on,
            identity_preservation: mean(reports.iter().map(|r| r.identity_preservation)).unwrap_or(0.0),
            prompt_consistency: mean(reports.iter().map(|r| r.prompt_consistency)).unwrap_or(0.0),
            attention_iou: mean(reports.iter().filter_map(|r| r.attention_iou)),
        }
    }
}

/// CSV text with a `# config_hash: ...` comment line before the header.
pub fn campaign_csv(rows: &[CampaignRow], config_hash: &str) -> Vec<u8> {
    let mut out = format!("# config_hash: {config_hash}\n").into_bytes();
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CAMPAIGN_COLUMNS).expect("in-memory csv");
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    out.extend(w.into_inner().expect("in-memory csv"));
    out
}

pub fn write_campaign_csv(path: &Path, rows: &[CampaignRow], config_hash: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| EvalError::io(dir, e))?;
    }
    fs::write(path, campaign_csv(rows, config_hash)).map_err(|e| EvalError::io(path, e))
}

/// Reads a campaign CSV, returning its config hash (if present) and rows.
/// A header that differs from [`CAMPAIGN_COLUMNS`] is rejected by name.
pub fn read_campaign_csv(path: &Path) -> Result<(Option<String>, Vec<CampaignRow>)> {
    let text = fs::read_to_string(path).map_err(|e| EvalError::io(path, e))?;
    let hash = text.lines().next().and_then(|l| l.strip_prefix("# config_hash: ")).map(str::to_string);
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| EvalError::format(path, e.to_string()))?.clone();
    for (i, want) in CAMPAIGN_COLUMNS.iter().enumerate() {
        match header.get(i) {
            Some(got) if got == *want => {}
            Some(got) => return Err(EvalError::format(path, format!("column {} is '{got}', expected '{want}'", i + 1))),
            None => return Err(EvalError::format(path, format!("missing column '{want}'"))),
        }
    }
    if let Some(extra) = header.get(CAMPAIGN_COLUMNS.len()) {
        return Err(EvalError::format(path, format!("unexpected column '{extra}'")));
    }
    let rows = r.deserialize().collect::<std::result::Result<Vec<CampaignRow>, _>>().map_err(|e| EvalError::format(path, e.to_string()))?;
    Ok((hash, rows))
}

pub fn write_reports_jsonl(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| EvalError::io(dir, e))?;
    }
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r).expect("report serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| EvalError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_uses_minimum() {
        let r = MetricsReport::new("h", 1, 0.7, 0.001, "a.png".into(), "c".into(), vec![0.8, 0.3, 0.5], 1.0, None);
        assert_eq!(r.identity_preservation, 0.3);
        let e = MetricsReport::new("h", 1, 0.7, 0.001, "a.png".into(), "c".into(), vec![], 1.0, None);
        assert_eq!(e.identity_preservation, 0.0);
    }

    #[test]
    fn csv_round_trip_and_schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let rows = vec![
            CampaignRow { seed: 1, alpha: 0.2, lambda_on: true, identity_preservation: 0.5, prompt_consistency: 0.25, attention_iou: Some(0.1) },
            CampaignRow { seed: 2, alpha: 1.0, lambda_on: false, identity_preservation: -0.125, prompt_consistency: 1.0, attention_iou: None },
        ];
        write_campaign_csv(&p, &rows, "abc").unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("# config_hash: abc\nseed,alpha,lambda_on,identity_preservation,prompt_consistency,attention_iou\n"));
        let (hash, back) = read_campaign_csv(&p).unwrap();
        assert_eq!(hash.as_deref(), Some("abc"));
        assert_eq!(back, rows);
        fs::write(&p, "seed,alpha,lambda,identity_preservation,prompt_consistency,attention_iou\n").unwrap();
        let err = read_campaign_csv(&p).unwrap_err().to_string();
        assert!(err.contains("'lambda'"), "{err}");
    }

    #[test]
    fn aggregate_skips_missing_iou() {
        let mk = |ip: f64, iou: Option<f64>| MetricsReport::new("h", 0, 0.0, 0.0, String::new(), String::new(), vec![ip], 0.5, iou);
        let row = CampaignRow::aggregate(3, 0.4, false, &[mk(0.2, Some(0.5)), mk(0.4, None)]);
        assert!((row.identity_preservation - 0.3).abs() < 1e-15);
        assert_eq!(row.attention_iou, Some(0.5));
    }
}
