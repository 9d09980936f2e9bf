use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::runner::{RunOutput, ScoreRow};
use crate::error::{Result, SgoifError};
use crate::metrics::DetectionMetrics;

fn io_err(path: &Path, e: impl std::fmt::Display) -> SgoifError {
    SgoifError::Io(format!("{}: {e}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Writes `metrics.json`, `scores_epoch_<k>.csv`, `controller_trace.csv` and
/// `solver_trace.csv` into `dir`.
pub fn write_run(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_json(&dir.join("metrics.json"), &out.report)?;
    for dump in &out.scores {
        write_csv(&dir.join(format!("scores_epoch_{}.csv", dump.epoch)), &dump.rows)?;
    }
    write_csv(&dir.join("controller_trace.csv"), &out.controller_trace)?;
    write_csv(&dir.join("solver_trace.csv"), &out.solver_trace)
}

/// Reads a score dump written by [`write_run`].
pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| SgoifError::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Detection metrics recomputed from a score dump.
pub fn metrics_from_scores(rows: &[ScoreRow]) -> DetectionMetrics {
    let pairs: Vec<(usize, f64)> = rows.iter().map(|r| (r.example_id, r.noise_score)).collect();
    let noisy: HashSet<usize> = rows.iter().filter(|r| r.noisy).map(|r| r.example_id).collect();
    DetectionMetrics::compute(&pairs, &noisy)
}
