//! Training metrics CSV: one row per optimization step, fixed column order.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use comet_core::trainer::MetricsRow;

use crate::error::{CliError, Result};

/// The stable column contract, in order.
pub const COLUMNS: &str = "stage,epoch,step,loss_recon,loss_commit,loss_cpc,loss_mi,\
loss_gate,loss_pmr,loss_ewc,teacher_fraction";

/// Canonical metrics location inside an output directory.
pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join("metrics.csv")
}

/// Renders rows to CSV text. Floats use the shortest round-trip form, so
/// identical runs produce identical bytes.
pub fn render(rows: &[MetricsRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(COLUMNS);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.stage,
            r.epoch,
            r.step,
            r.loss_recon,
            r.loss_commit,
            r.loss_cpc,
            r.loss_mi,
            r.loss_gate,
            r.loss_pmr,
            r.loss_ewc,
            r.teacher_fraction
        )
        .expect("string write");
    }
    out
}

pub fn write(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    fs::write(path, render(rows)).map_err(|e| CliError::io(path, e))
}
