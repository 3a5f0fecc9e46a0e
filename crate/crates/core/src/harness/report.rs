use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::blob::write_atomic;
use super::train::TrainConfig;
use crate::autodiff::TapeStats;
use crate::costmodel::CostReport;
use crate::error::{Error, Result};

/// Environment variable naming the default report directory.
pub const REPORT_DIR_ENV: &str = "LOSA_REPORT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub arch: String,
    pub method: String,
    pub seed: u64,
    pub learned_params: u64,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub loss_curve: Vec<f64>,
    pub cost: CostReport,
    /// Accounting of the last training step's tape (whole batch).
    pub measured: TapeStats,
    pub measured_bwd_macs_per_example: u64,
    pub analytic_bwd_macs_per_example: u64,
    pub wall_clock_ms_per_step: f64,
    pub config: TrainConfig,
}

pub const CSV_HEADER: &str = "arch,method,seed,learned_params,fwd_gmacs,bwd_gmacs,cached_activation_bytes,total_train_bytes,initial_accuracy,final_accuracy,wall_clock_ms_per_step";

impl RunReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.arch,
            self.method,
            self.seed,
            self.learned_params,
            self.cost.fwd_gmacs,
            self.cost.bwd_gmacs,
            self.cost.cached_activation_bytes,
            self.cost.total_train_bytes,
            self.initial_accuracy,
            self.final_accuracy,
            self.wall_clock_ms_per_step
        )
    }
}

/// Writes `path` as JSON and a sibling `.csv` with header and one row.
/// Both go through temp files, so a failure leaves nothing behind.
pub fn emit_report(r: &RunReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(r)?;
    write_atomic(path, json.as_bytes())?;
    let csv = format!("{CSV_HEADER}\n{}\n", r.csv_row());
    write_atomic(&path.with_extension("csv"), csv.as_bytes())
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Every `*.json` report in `dir`, sorted by file name.
pub fn collect_reports(dir: &Path) -> Result<Vec<(PathBuf, RunReport)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| read_report(&p).map(|r| (p, r)))
        .collect()
}

/// Aggregates reports into one CSV table.
pub fn write_table(reports: &[RunReport], out: &Path) -> Result<()> {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    write_atomic(out, s.as_bytes())
}
