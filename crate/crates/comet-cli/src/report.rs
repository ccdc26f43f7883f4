//! Evaluation artifacts: the JSON metrics report and the code-activation CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use comet_core::quantizer::ActivationStats;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// One scalar metric with optional breakdown coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<usize>,
    /// Modality pair as "a|b" where relevant (agreement, transfer, retrieval).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pair: Option<String>,
    pub value: f64,
}

impl MetricEntry {
    pub fn new(name: &str, stage: Option<usize>, pair: Option<String>, value: f64) -> Self {
        Self {
            name: name.to_string(),
            stage,
            pair,
            value,
        }
    }
}

/// The full evaluation report written as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub config_hash: String,
    /// Checkpoint file the metrics were computed from.
    pub checkpoint: String,
    pub metrics: Vec<MetricEntry>,
}

impl EvalReport {
    /// Fractional metrics must land in [0, 1]; forgetting may be negative
    /// (backward transfer) so it is exempt.
    pub fn validate(&self) -> Result<()> {
        for m in &self.metrics {
            let fractional = m.name.starts_with("agreement")
                || m.name.starts_with("transfer")
                || m.name.starts_with("retrieval");
            if fractional && !(0.0..=1.0).contains(&m.value) {
                return Err(CliError::Config(format!(
                    "metric {} out of range [0,1]: {}",
                    m.name, m.value
                )));
            }
            if !m.value.is_finite() {
                return Err(CliError::Config(format!(
                    "metric {} is not finite: {}",
                    m.name, m.value
                )));
            }
        }
        Ok(())
    }
}

pub fn report_path(dir: &Path) -> PathBuf {
    dir.join("eval_report.json")
}

pub fn activation_path(dir: &Path) -> PathBuf {
    dir.join("activation.csv")
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    report.validate()?;
    let mut text = serde_json::to_string_pretty(report)
        .map_err(|e| CliError::format(path, format!("serialize report: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))
}

/// Renders per-code activation rows: code id, activation class, then one
/// count column per modality in the stats' order.
pub fn render_activation(stats: &ActivationStats) -> String {
    let mut out = String::new();
    out.push_str("code_id,class");
    for m in &stats.modalities {
        write!(out, ",count_{m}").expect("string write");
    }
    out.push('\n');
    for (code, counts) in stats.counts.iter().enumerate() {
        write!(out, "{code},{}", stats.classes[code]).expect("string write");
        for c in counts {
            write!(out, ",{c}").expect("string write");
        }
        out.push('\n');
    }
    out
}

pub fn write_activation(path: &Path, stats: &ActivationStats) -> Result<()> {
    fs::write(path, render_activation(stats)).map_err(|e| CliError::io(path, e))
}
