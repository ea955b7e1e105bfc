//! Study reports and their JSON/CSV serializations.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{HarnessError, StudyConfig, StudyKind};
use crate::iv::ParamSummary;

/// Bumped whenever a field is renamed or removed.
pub const SCHEMA_VERSION: &str = "fsiv-report/1";

/// Per-method metrics written to the flat CSV, in row order.
pub const CSV_METRICS: [&str; 5] = ["rmse_mean", "rmse_se", "coverage", "width_mean", "ess_mean"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown format `{other}` (expected json or csv)")),
        }
    }
}

/// Aggregates for one first-stage method. Metrics that do not apply to the
/// study are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub name: String,
    pub replications_ok: usize,
    pub failures: usize,
    /// Mean scaled RMSE and its Monte Carlo s.e.
    pub rmse_mean: Option<f64>,
    pub rmse_se: Option<f64>,
    /// Fraction of 95% intervals for β covering the truth.
    pub coverage: Option<f64>,
    pub coverage_se: Option<f64>,
    pub coverage90: Option<f64>,
    /// Mean width of the 95% interval for β.
    pub width_mean: Option<f64>,
    pub width_se: Option<f64>,
    pub width90_mean: Option<f64>,
    /// Mean effective sample size of the first-stage chain coordinates.
    pub ess_mean: Option<f64>,
    /// Mean effective sample size of the importance weights.
    pub importance_ess_mean: Option<f64>,
    pub degenerate_rate: Option<f64>,
    pub low_ess_rate: Option<f64>,
    pub rank_mean: Option<f64>,
}

impl MethodSummary {
    pub fn empty(name: &str) -> Self {
        Self {
            name: name.to_owned(),
            replications_ok: 0,
            failures: 0,
            rmse_mean: None,
            rmse_se: None,
            coverage: None,
            coverage_se: None,
            coverage90: None,
            width_mean: None,
            width_se: None,
            width90_mean: None,
            ess_mean: None,
            importance_ess_mean: None,
            degenerate_rate: None,
            low_ess_rate: None,
            rank_mean: None,
        }
    }

    fn csv_value(&self, metric: &str) -> Option<f64> {
        match metric {
            "rmse_mean" => self.rmse_mean,
            "rmse_se" => self.rmse_se,
            "coverage" => self.coverage,
            "width_mean" => self.width_mean,
            "ess_mean" => self.ess_mean,
            _ => None,
        }
    }
}

/// Mean and s.e. of `metric(a) - metric(b)` over replications where both
/// methods succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDifference {
    pub metric: String,
    pub a: String,
    pub b: String,
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

/// Interval-width comparison of `method` against `reference`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageComparison {
    pub method: String,
    pub reference: String,
    /// Mean over replications of `width(method) / width(reference)`.
    pub mean_width_ratio: f64,
    /// Fraction of replications where `method` gives the narrower interval.
    pub narrower_fraction: f64,
    /// `1 - mean width(method) / mean width(reference)`.
    pub width_reduction: f64,
    pub n: usize,
}

/// One (replication, method) outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub method: String,
    pub rmse: Option<f64>,
    /// Theoretical residual s.d. of the treatment.
    pub sigma: Option<f64>,
    pub beta: Option<ParamSummary>,
    pub covered95: Option<bool>,
    pub covered90: Option<bool>,
    pub ess: Option<f64>,
    pub importance_ess: Option<f64>,
    pub degenerate: Option<bool>,
    pub low_ess: Option<bool>,
    pub rank: Option<usize>,
    pub error: Option<String>,
}

impl ReplicationRecord {
    pub fn new(replication: usize, method: &str) -> Self {
        Self {
            replication,
            method: method.to_owned(),
            rmse: None,
            sigma: None,
            beta: None,
            covered95: None,
            covered90: None,
            ess: None,
            importance_ess: None,
            degenerate: None,
            low_ess: None,
            rank: None,
            error: None,
        }
    }

    pub fn failed(replication: usize, method: &str, error: String) -> Self {
        Self {
            error: Some(error),
            ..Self::new(replication, method)
        }
    }
}

/// Posterior summary from a single `fit` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub method: String,
    pub n: usize,
    pub p: usize,
    pub beta: ParamSummary,
    pub alpha: ParamSummary,
    pub xi_sq: ParamSummary,
    pub importance_ess: f64,
    pub first_stage_ess: f64,
    pub degenerate: bool,
    pub low_ess: bool,
    pub rank: Option<usize>,
    pub n_draws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub schema: String,
    pub study: StudyKind,
    pub config: StudyConfig,
    pub seed: u64,
    pub input_hash: String,
    pub per_method: Vec<MethodSummary>,
    #[serde(default)]
    pub paired_differences: Vec<PairedDifference>,
    #[serde(default)]
    pub coverage_comparisons: Vec<CoverageComparison>,
    #[serde(default)]
    pub fits: Vec<FitSummary>,
    /// Failed (replication, method) pairs.
    pub failures: usize,
    /// Parameter draws rejected for a non-positive residual variance.
    pub rejected_parameter_draws: usize,
    pub runtime_sec: f64,
    #[serde(default)]
    pub replications: Vec<ReplicationRecord>,
}

impl StudyReport {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.per_method.iter().find(|m| m.name == name)
    }

    pub fn paired(&self, metric: &str, a: &str, b: &str) -> Option<&PairedDifference> {
        self.paired_differences
            .iter()
            .find(|d| d.metric == metric && d.a == a && d.b == b)
    }

    pub fn comparison(&self, method: &str, reference: &str) -> Option<&CoverageComparison> {
        self.coverage_comparisons
            .iter()
            .find(|c| c.method == method && c.reference == reference)
    }
}

/// Git-style content hash: SHA-256 over `blob <len>\0` followed by the
/// canonical config JSON and any raw input bytes.
pub fn input_hash(config: &StudyConfig, data: Option<&[u8]>) -> String {
    let mut payload = serde_json::to_vec(config).expect("config serializes");
    if let Some(bytes) = data {
        payload.extend_from_slice(bytes);
    }
    let mut hasher = Sha256::new();
    hasher.update(format!("blob {}\0", payload.len()).as_bytes());
    hasher.update(&payload);
    hex::encode(hasher.finalize())
}

pub fn render_report(report: &StudyReport, format: ReportFormat) -> Result<String, HarnessError> {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report)
                .map_err(|e| HarnessError::Numerical(format!("report does not serialize: {e}")))?;
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let io = |e: csv::Error| HarnessError::Io(std::io::Error::other(e));
            w.write_record(["method", "metric", "value"]).map_err(io)?;
            for m in &report.per_method {
                for metric in CSV_METRICS {
                    let value = m.csv_value(metric).map(|v| v.to_string()).unwrap_or_default();
                    w.write_record([m.name.as_str(), metric, value.as_str()]).map_err(io)?;
                }
            }
            let bytes = w
                .into_inner()
                .map_err(|e| HarnessError::Io(std::io::Error::other(e.to_string())))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
    }
}

pub fn emit_report(report: &StudyReport, format: ReportFormat, path: &Path) -> Result<(), HarnessError> {
    std::fs::write(path, render_report(report, format)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> StudyReport {
        let config = StudyConfig::new(StudyKind::RmseRegime1, 3);
        let mut a = MethodSummary::empty("factor_shrinkage");
        a.rmse_mean = Some(1.1);
        a.rmse_se = Some(0.01);
        StudyReport {
            schema: SCHEMA_VERSION.into(),
            study: config.kind,
            seed: config.seed,
            input_hash: input_hash(&config, None),
            config,
            per_method: vec![a, MethodSummary::empty("horseshoe_raw")],
            paired_differences: vec![],
            coverage_comparisons: vec![],
            fits: vec![],
            failures: 0,
            rejected_parameter_draws: 0,
            runtime_sec: 1.5,
            replications: vec![],
        }
    }

    #[test]
    fn csv_has_one_row_per_method_metric() {
        let text = render_report(&sample_report(), ReportFormat::Csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 2 * CSV_METRICS.len());
        assert_eq!(lines[1], "factor_shrinkage,rmse_mean,1.1");
        assert_eq!(lines[6], "horseshoe_raw,rmse_mean,");
    }

    #[test]
    fn json_round_trips() {
        let report = sample_report();
        let text = render_report(&report, ReportFormat::Json).unwrap();
        let back: StudyReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
        assert_eq!(text, render_report(&back, ReportFormat::Json).unwrap());
    }

    #[test]
    fn hash_depends_on_config_and_data() {
        let cfg = StudyConfig::new(StudyKind::FitCsv, 1);
        let h = input_hash(&cfg, Some(b"y,x,z1\n"));
        assert_eq!(h.len(), 64);
        assert_eq!(h, input_hash(&cfg, Some(b"y,x,z1\n")));
        assert_ne!(h, input_hash(&cfg, Some(b"y,x,z2\n")));
        assert_ne!(
            h,
            input_hash(&StudyConfig::new(StudyKind::FitCsv, 2), Some(b"y,x,z1\n"))
        );
    }
}
