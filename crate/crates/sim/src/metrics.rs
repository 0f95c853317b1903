//! Per-round records and their CSV / JSONL writers.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub mean_train_loss: f64,
    pub global_aug_lagrangian: f64,
    /// `max_i ‖θ_i − θ‖∞` over every parameter block.
    pub consensus_residual_max: f64,
    pub consensus_residual_mean: f64,
    pub mean_test_accuracy: f64,
    pub accuracy_std: f64,
    pub mean_fp_iterations: f64,
    pub participating_nodes: Vec<usize>,
}

pub const CSV_COLUMNS: [&str; 9] = [
    "round",
    "mean_train_loss",
    "global_aug_lagrangian",
    "consensus_residual_max",
    "consensus_residual_mean",
    "mean_test_accuracy",
    "accuracy_std",
    "mean_fp_iterations",
    "participating_nodes",
];

impl RoundMetrics {
    /// Fields in column order. Floats use the shortest round-trip form and
    /// node ids are joined with `;`.
    pub fn csv_record(&self) -> [String; 9] {
        let f = |v: f64| format!("{v:?}");
        [
            self.round.to_string(),
            f(self.mean_train_loss),
            f(self.global_aug_lagrangian),
            f(self.consensus_residual_max),
            f(self.consensus_residual_mean),
            f(self.mean_test_accuracy),
            f(self.accuracy_std),
            f(self.mean_fp_iterations),
            self.participating_nodes
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(";"),
        ]
    }
}

/// Mean test accuracy over the last `window` rounds (fewer if the run is shorter).
pub fn trailing_accuracy(metrics: &[RoundMetrics], window: usize) -> Option<f64> {
    let tail = &metrics[metrics.len().saturating_sub(window)..];
    (!tail.is_empty()).then(|| tail.iter().map(|m| m.mean_test_accuracy).sum::<f64>() / tail.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emit {
    Csv,
    Jsonl,
    Both,
}

impl Emit {
    fn csv(self) -> bool {
        matches!(self, Emit::Csv | Emit::Both)
    }

    fn jsonl(self) -> bool {
        matches!(self, Emit::Jsonl | Emit::Both)
    }
}

/// Appends one record per round to `metrics.csv` and/or `metrics.jsonl`,
/// flushing after every round.
pub struct MetricsWriter {
    dir: PathBuf,
    csv: Option<csv::Writer<File>>,
    jsonl: Option<BufWriter<File>>,
}

impl MetricsWriter {
    pub fn create(dir: &Path, emit: Emit) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;
        let csv = if emit.csv() {
            let path = dir.join("metrics.csv");
            let file = File::create(&path).map_err(|e| SimError::io(&path, e))?;
            let mut w = csv::Writer::from_writer(file);
            w.write_record(CSV_COLUMNS)?;
            w.flush().map_err(|e| SimError::io(&path, e))?;
            Some(w)
        } else {
            None
        };
        let jsonl = if emit.jsonl() {
            let path = dir.join("metrics.jsonl");
            Some(BufWriter::new(File::create(&path).map_err(|e| SimError::io(&path, e))?))
        } else {
            None
        };
        Ok(MetricsWriter {
            dir: dir.to_path_buf(),
            csv,
            jsonl,
        })
    }

    pub fn write(&mut self, m: &RoundMetrics) -> Result<()> {
        if let Some(w) = &mut self.csv {
            w.write_record(m.csv_record())?;
            w.flush().map_err(|e| SimError::io(self.dir.join("metrics.csv"), e))?;
        }
        if let Some(w) = &mut self.jsonl {
            let path = self.dir.join("metrics.jsonl");
            serde_json::to_writer(&mut *w, m)?;
            writeln!(w).and_then(|_| w.flush()).map_err(|e| SimError::io(path, e))?;
        }
        Ok(())
    }
}

/// Writes `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| SimError::io(path, e))
}
