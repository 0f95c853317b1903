//! Backing code for the `project` and `partition` subcommands.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use fedeq_core::projection::project_inf_matrix;
use fedeq_core::tensor::inf_norm;
use fedeq_core::{Matrix, ProjectionSettings};
use serde::Serialize;

use crate::data::{partition_by_label, Dataset, PartitionSpec};
use crate::error::{Result, SimError};

/// Reads a square or rectangular matrix: one comma-separated row per line,
/// no header. Blank lines are skipped.
pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
    let parse_err = |line: usize, message: String| SimError::Parse {
        path: path.to_path_buf(),
        line: line as u64,
        message,
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(k + 1, format!("`{}` is not a finite number", s.trim())))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(parse_err(k + 1, format!("expected {} columns, found {}", first.len(), row.len())));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(SimError::Config(format!("{} holds no matrix rows", path.display())));
    }
    Ok(Matrix::from_rows(&rows)?)
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut text = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| SimError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectionReport {
    pub kappa: f64,
    pub inf_norm_before: f64,
    pub inf_norm_after: f64,
    pub noop: bool,
    pub feasible: bool,
}

pub fn project_matrix(b: &Matrix, kappa: f64) -> Result<(Matrix, ProjectionReport)> {
    let settings = ProjectionSettings::with_kappa(kappa);
    settings.validate().map_err(|e| SimError::Config(format!("kappa: {e}")))?;
    let projected = project_inf_matrix(b, &settings)?;
    let after = inf_norm(&projected);
    let report = ProjectionReport {
        kappa,
        inf_norm_before: inf_norm(b),
        inf_norm_after: after,
        noop: &projected == b,
        feasible: after <= kappa,
    };
    Ok((projected, report))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShardManifest {
    pub node_id: usize,
    pub labels: Vec<usize>,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionManifest {
    pub n_nodes: usize,
    pub classes_per_node: usize,
    pub test_fraction: f64,
    pub seed: u64,
    pub num_samples: usize,
    pub shards: Vec<ShardManifest>,
}

pub fn partition_manifest(ds: &Dataset, spec: &PartitionSpec) -> Result<PartitionManifest> {
    let shards = partition_by_label(ds, spec)?
        .into_iter()
        .map(|s| ShardManifest {
            node_id: s.node_id,
            labels: s
                .train
                .labels
                .iter()
                .chain(&s.test.labels)
                .copied()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
            train_ids: s.train.sample_ids,
            test_ids: s.test.sample_ids,
        })
        .collect();
    Ok(PartitionManifest {
        n_nodes: spec.n_nodes,
        classes_per_node: spec.classes_per_node,
        test_fraction: spec.test_fraction,
        seed: spec.seed,
        num_samples: ds.len(),
        shards,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_files_round_trip_and_report_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.csv");
        let b = Matrix::from_rows(&[vec![3.0, 1.0], vec![0.1, -0.2]]).unwrap();
        write_matrix(&path, &b).unwrap();
        assert_eq!(read_matrix(&path).unwrap(), b);

        fs::write(&path, "1,2\n3,x\n").unwrap();
        assert!(matches!(read_matrix(&path), Err(SimError::Parse { line: 2, .. })));
        fs::write(&path, "1,2\n3\n").unwrap();
        assert!(matches!(read_matrix(&path), Err(SimError::Parse { line: 2, .. })));
    }

    #[test]
    fn projection_report() {
        let feasible = Matrix::from_rows(&[vec![0.3, -0.2], vec![0.1, 0.5]]).unwrap();
        let (_, r) = project_matrix(&feasible, 0.95).unwrap();
        assert!(r.noop && r.feasible);
        let big = Matrix::from_rows(&[vec![3.0, 1.0], vec![0.1, 0.2]]).unwrap();
        let (p, r) = project_matrix(&big, 0.5).unwrap();
        assert!(!r.noop && r.feasible && r.inf_norm_before == 4.0);
        assert!(inf_norm(&p) <= 0.5);
        assert!(project_matrix(&big, 1.0).is_err());
    }
}
