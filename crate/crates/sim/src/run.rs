//! End-to-end training runs driven by an [`Experiment`].

use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::config::{DataSource, Experiment};
use crate::data::{generate_synthetic, load_csv, partition_by_label, NodeShard, PartitionSpec};
use crate::error::Result;
use crate::fed::{adapt_unseen, mean_std, Federation};
use crate::metrics::{trailing_accuracy, write_json, MetricsWriter, RoundMetrics};

/// Rounds averaged for the headline accuracy.
pub const FINAL_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Shards {
    pub training: Vec<NodeShard>,
    /// Held out of training entirely; the highest node ids.
    pub unseen: Vec<NodeShard>,
    pub num_classes: usize,
}

pub fn build_shards(exp: &Experiment) -> Result<Shards> {
    let (dataset, n_nodes, classes_per_node) = match &exp.data {
        DataSource::Synthetic(spec) => (generate_synthetic(spec)?.dataset, spec.n_nodes, spec.classes_per_node),
        DataSource::Csv {
            path,
            num_classes,
            n_nodes,
            classes_per_node,
        } => (load_csv(path, *num_classes)?, *n_nodes, *classes_per_node),
    };
    let spec = PartitionSpec {
        test_fraction: exp.test_fraction,
        ..PartitionSpec::new(n_nodes, classes_per_node, exp.fed.seed)
    };
    let mut training = partition_by_label(&dataset, &spec)?;
    let unseen = training.split_off(n_nodes - exp.unseen_nodes());
    Ok(Shards {
        training,
        unseen,
        num_classes: dataset.num_classes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub rounds: usize,
    pub training_nodes: usize,
    pub unseen_nodes: usize,
    pub final_window: usize,
    /// Mean personalized test accuracy over the last `final_window` rounds.
    pub final_mean_accuracy: Option<f64>,
    pub unseen_mean_accuracy: Option<f64>,
    pub unseen_accuracy_std: Option<f64>,
}

#[derive(Debug, Serialize)]
struct RunInfo {
    version: &'static str,
    threads: usize,
    started_unix_ms: u128,
    finished_unix_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

pub struct TrainOutcome {
    pub metrics: Vec<RoundMetrics>,
    pub summary: Summary,
    pub federation: Federation,
}

/// Trains, adapts unseen nodes, and writes `metrics.csv`/`metrics.jsonl`,
/// `summary.json` and the timestamped `run_info.json` into the output directory.
/// Metrics already produced stay on disk if a later round fails.
pub fn train(exp: &Experiment, threads: usize) -> Result<TrainOutcome> {
    let started = now_ms();
    let shards = build_shards(exp)?;
    let mut writer = MetricsWriter::create(&exp.output_dir, exp.emit)?;
    let mut fed = Federation::new(
        exp.fed.clone(),
        exp.model.clone(),
        shards.training,
        shards.num_classes,
        threads,
    )?;
    let metrics = fed.run(exp.fed.rounds, |m| writer.write(m))?;

    let (unseen_mean, unseen_std) = if shards.unseen.is_empty() {
        (None, None)
    } else {
        let theta = fed.pending_theta()?;
        let accs = adapt_unseen(&theta, &exp.model, shards.num_classes, &shards.unseen, &exp.fed, threads)?;
        let (m, s) = mean_std(&accs);
        (Some(m), Some(s))
    };
    let summary = Summary {
        rounds: metrics.len(),
        training_nodes: fed.n_nodes(),
        unseen_nodes: shards.unseen.len(),
        final_window: FINAL_WINDOW,
        final_mean_accuracy: trailing_accuracy(&metrics, FINAL_WINDOW),
        unseen_mean_accuracy: unseen_mean,
        unseen_accuracy_std: unseen_std,
    };
    write_json(&exp.output_dir.join("summary.json"), &summary)?;
    write_json(
        &exp.output_dir.join("run_info.json"),
        &RunInfo {
            version: env!("CARGO_PKG_VERSION"),
            threads,
            started_unix_ms: started,
            finished_unix_ms: now_ms(),
        },
    )?;
    Ok(TrainOutcome {
        metrics,
        summary,
        federation: fed,
    })
}
