use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalError;

pub const Z95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub x: f64,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

impl ReportRow {
    pub fn half_width(&self) -> f64 {
        (self.ci_high - self.ci_low) / 2.0
    }

    /// `mean±half` with two decimals, e.g. `3.57±0.18`.
    pub fn formatted(&self) -> String {
        format!("{:.2}±{:.2}", self.mean, self.half_width())
    }
}

/// Point estimates with 95% intervals, writable as CSV or as a JSON series
/// for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn new(metric: impl Into<String>) -> Self {
        Self {
            metric: metric.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, label: impl Into<String>, x: f64, mean: f64, half: f64, n: usize) {
        self.rows.push(ReportRow {
            label: label.into(),
            x,
            mean,
            ci_low: mean - half,
            ci_high: mean + half,
            n,
        });
    }

    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["metric", "label", "x", "mean", "ci_low", "ci_high", "n"])
            .map_err(|e| EvalError::Io(e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                self.metric.clone(),
                r.label.clone(),
                r.x.to_string(),
                format!("{:.6}", r.mean),
                format!("{:.6}", r.ci_low),
                format!("{:.6}", r.ci_high),
                r.n.to_string(),
            ])
            .map_err(|e| EvalError::Io(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| EvalError::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "metric": self.metric,
            "series": self.rows.iter().map(|r| serde_json::json!({
                "label": r.label,
                "x": r.x,
                "mean": r.mean,
                "ci_low": r.ci_low,
                "ci_high": r.ci_high,
                "n": r.n,
            })).collect::<Vec<_>>(),
        })
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`; returns both paths.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>, EvalError> {
        let io = |e: std::io::Error| EvalError::Io(e.to_string());
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&csv_path, self.to_csv()?).map_err(io)?;
        let json = serde_json::to_string_pretty(&self.to_json()).expect("report serializes");
        std::fs::write(&json_path, json + "\n").map_err(io)?;
        Ok(vec![csv_path, json_path])
    }
}

/// Mean and 95% half-width `1.96·s/√n` with the sample standard deviation;
/// the half-width is 0 below two observations.
pub fn mean_ci(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Z95 * var.sqrt() / n.sqrt())
}

/// Proportion and its normal-approximation 95% half-width.
pub fn proportion_ci(count: usize, n: usize) -> (f64, f64) {
    let p = count as f64 / n as f64;
    (p, Z95 * (p * (1.0 - p) / n as f64).sqrt())
}
