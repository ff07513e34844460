//! Machine-readable run reports.
//!
//! A report records, for every experiment, the metrics it asserted —
//! each one naming the library operation that produced the number, the
//! check applied, and the tolerance — plus the artifact files written and
//! any structured error.  Reports carry no timestamps or absolute paths:
//! rerunning the same config with the same seeds yields a byte-identical
//! `report.json`, at any thread count.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ModelEcho;

/// How a metric's `value` is compared against `target`/`tolerance`.
#[derive(Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    /// `|value − target| ≤ tolerance`.
    AbsDiff,
    /// `value ≤ target + tolerance`.
    Upper,
    /// `value ≥ target − tolerance`.
    Lower,
}

/// One asserted number.
#[derive(Clone, Debug, Serialize)]
pub struct Metric {
    pub name: String,
    /// Library routine that produced `value`.
    pub operation: String,
    pub check: Check,
    pub value: f64,
    pub target: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Metric {
    pub fn close(name: &str, operation: &str, value: f64, target: f64, tolerance: f64) -> Self {
        let pass = (value - target).abs() <= tolerance;
        Metric {
            name: name.into(),
            operation: operation.into(),
            check: Check::AbsDiff,
            value,
            target,
            tolerance,
            pass,
        }
    }

    pub fn at_most(name: &str, operation: &str, value: f64, target: f64, tolerance: f64) -> Self {
        let pass = value <= target + tolerance;
        Metric {
            name: name.into(),
            operation: operation.into(),
            check: Check::Upper,
            value,
            target,
            tolerance,
            pass,
        }
    }

    pub fn at_least(name: &str, operation: &str, value: f64, target: f64, tolerance: f64) -> Self {
        let pass = value >= target - tolerance;
        Metric {
            name: name.into(),
            operation: operation.into(),
            check: Check::Lower,
            value,
            target,
            tolerance,
            pass,
        }
    }
}

/// Outcome of one experiment.
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentReport {
    pub kind: String,
    /// Human-readable summary of what ran (measure names, horizons, verdicts).
    pub label: String,
    pub metrics: Vec<Metric>,
    /// File names written next to the report, relative to the output directory.
    pub artifacts: Vec<String>,
    /// Structured error from the library if the experiment aborted.
    pub error: Option<String>,
    pub pass: bool,
}

impl ExperimentReport {
    pub fn completed(kind: &str, label: String, metrics: Vec<Metric>, artifacts: Vec<String>) -> Self {
        let pass = metrics.iter().all(|m| m.pass);
        ExperimentReport {
            kind: kind.into(),
            label,
            metrics,
            artifacts,
            error: None,
            pass,
        }
    }

    pub fn failed(kind: &str, label: String, error: String) -> Self {
        ExperimentReport {
            kind: kind.into(),
            label,
            metrics: Vec::new(),
            artifacts: Vec::new(),
            error: Some(error),
            pass: false,
        }
    }
}

/// The full run report.
#[derive(Debug, Serialize)]
pub struct Report {
    /// File stem of the scenario config.
    pub scenario: String,
    pub model: ModelEcho,
    pub experiments: Vec<ExperimentReport>,
    pub pass: bool,
}

impl Report {
    pub fn new(scenario: String, model: ModelEcho, experiments: Vec<ExperimentReport>) -> Self {
        let pass = experiments.iter().all(|e| e.pass);
        Report { scenario, model, experiments, pass }
    }
}

/// Writes `report.json` into `out_dir` and returns its path.
pub fn write_report(report: &Report, out_dir: &Path) -> std::io::Result<PathBuf> {
    let path = out_dir.join("report.json");
    let mut file = std::fs::File::create(&path)?;
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    file.write_all(text.as_bytes())?;
    file.write_all(b"\n")?;
    Ok(path)
}
