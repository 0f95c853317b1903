//! Synthetic heterogeneous data, by-label partitioning and CSV datasets.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use fedeq_core::{Batch, Vector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SimError};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vector>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<Vector>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(SimError::Config(format!(
                "dataset has {} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(SimError::Config(format!("label {l} out of range for {num_classes} classes")));
        }
        if let Some(first) = features.first() {
            if features.iter().any(|f| f.len() != first.len()) {
                return Err(SimError::Config("feature rows differ in length".into()));
            }
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vector::len)
    }

    /// Every sample as one batch, with sample ids equal to row positions.
    pub fn to_batch(&self) -> Batch {
        Batch {
            inputs: self.features.clone(),
            labels: self.labels.clone(),
            sample_ids: (0..self.len()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_nodes: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_node: usize,
    /// 0 gives every node the same class distributions.
    pub heterogeneity: f64,
    /// Distinct classes held by each node.
    pub classes_per_node: usize,
    /// Standard deviation of the global class means.
    pub class_separation: f64,
    /// Standard deviation of the per-node mean shifts before scaling by
    /// `heterogeneity`.
    pub node_offset_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_nodes: 20,
            num_classes: 10,
            dim: 10,
            samples_per_node: 60,
            heterogeneity: 0.5,
            classes_per_node: 2,
            class_separation: 1.0,
            node_offset_scale: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub dataset: Dataset,
    /// The node whose distribution produced each sample.
    pub origin: Vec<usize>,
}

/// Classes held by each node: a seed-shuffled class list walked round-robin,
/// `p` consecutive entries per node.
pub fn class_plan(num_classes: usize, n_nodes: usize, classes_per_node: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if classes_per_node == 0 || classes_per_node > num_classes {
        return Err(SimError::Config(format!(
            "classes_per_node must lie in 1..={num_classes}, got {classes_per_node}"
        )));
    }
    if n_nodes * classes_per_node < num_classes {
        return Err(SimError::Config(format!(
            "{n_nodes} nodes with {classes_per_node} classes each cannot cover {num_classes} classes"
        )));
    }
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x636c_6173_735f_706c));
    Ok((0..n_nodes)
        .map(|k| {
            (0..classes_per_node)
                .map(|j| order[(k * classes_per_node + j) % num_classes])
                .collect()
        })
        .collect())
}

/// Per-node shares of `total` over `parts` slots, earlier slots taking the remainder.
fn even_split(total: usize, parts: usize) -> impl Iterator<Item = usize> {
    (0..parts).map(move |j| total / parts + usize::from(j < total % parts))
}

/// Gaussian classes with node-specific mean shifts.
///
/// Samples are laid out node by node, following the same class plan that
/// [`partition_by_label`] uses, so partitioning with the same seed hands each
/// node exactly the samples drawn from its own distribution.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Synthetic> {
    if spec.n_nodes == 0 || spec.num_classes == 0 || spec.dim == 0 || spec.samples_per_node == 0 {
        return Err(SimError::Config("synthetic data needs positive counts".into()));
    }
    if !(0.0..=1.0).contains(&spec.heterogeneity) {
        return Err(SimError::Config(format!(
            "heterogeneity must lie in [0, 1], got {}",
            spec.heterogeneity
        )));
    }
    let plan = class_plan(spec.num_classes, spec.n_nodes, spec.classes_per_node, spec.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut gauss = |scale: f64| -> Vec<f64> {
        (0..spec.dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let means: Vec<Vec<f64>> = (0..spec.num_classes).map(|_| gauss(spec.class_separation)).collect();

    let mut features = Vec::with_capacity(spec.n_nodes * spec.samples_per_node);
    let mut labels = Vec::with_capacity(features.capacity());
    let mut origin = Vec::with_capacity(features.capacity());
    for (node, classes) in plan.iter().enumerate() {
        for (&class, count) in classes.iter().zip(even_split(spec.samples_per_node, classes.len())) {
            let offset = gauss(spec.node_offset_scale);
            let center: Vec<f64> = means[class]
                .iter()
                .zip(&offset)
                .map(|(m, o)| m + spec.heterogeneity * o)
                .collect();
            for _ in 0..count {
                let noise = gauss(1.0);
                features.push(Vector::from_vec(center.iter().zip(&noise).map(|(c, e)| c + e).collect()));
                labels.push(class);
                origin.push(node);
            }
        }
    }
    Ok(Synthetic {
        dataset: Dataset::new(features, labels, spec.num_classes)?,
        origin,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub n_nodes: usize,
    pub classes_per_node: usize,
    pub test_fraction: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn new(n_nodes: usize, classes_per_node: usize, seed: u64) -> Self {
        PartitionSpec {
            n_nodes,
            classes_per_node,
            test_fraction: 0.2,
            seed,
        }
    }
}

/// One node's local data.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeShard {
    pub node_id: usize,
    pub train: Batch,
    pub test: Batch,
}

impl NodeShard {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.train.sample_ids.iter().chain(&self.test.sample_ids).copied()
    }
}

fn batch_of(ds: &Dataset, ids: &[usize]) -> Batch {
    Batch {
        inputs: ids.iter().map(|&i| ds.features[i].clone()).collect(),
        labels: ids.iter().map(|&i| ds.labels[i]).collect(),
        sample_ids: ids.to_vec(),
    }
}

/// By-label non-i.i.d. split: each node receives the classes of
/// [`class_plan`], and each class's samples (in id order) are cut into equal
/// contiguous runs for its holders in ascending node order. Every node's
/// samples are then split per class into train and test.
pub fn partition_by_label(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<NodeShard>> {
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(SimError::Config(format!(
            "test_fraction must lie in (0, 1), got {}",
            spec.test_fraction
        )));
    }
    if spec.n_nodes == 0 {
        return Err(SimError::Config("n_nodes must be positive".into()));
    }
    let plan = class_plan(ds.num_classes, spec.n_nodes, spec.classes_per_node, spec.seed)?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (node, classes) in plan.iter().enumerate() {
        for &c in classes {
            holders[c].push(node);
        }
    }

    // node -> class -> sample ids
    let mut owned: Vec<Vec<Vec<usize>>> = vec![Vec::new(); spec.n_nodes];
    for (class, ids) in by_class.iter().enumerate() {
        let mut start = 0;
        for (&node, len) in holders[class].iter().zip(even_split(ids.len(), holders[class].len())) {
            owned[node].push(ids[start..start + len].to_vec());
            start += len;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7465_7374_5f73_706c);
    let shards = owned
        .into_iter()
        .enumerate()
        .map(|(node_id, per_class)| {
            let mut train = Vec::new();
            let mut test = Vec::new();
            for mut ids in per_class {
                ids.shuffle(&mut rng);
                let m = ids.len();
                let n_test = if m < 2 {
                    0
                } else {
                    ((spec.test_fraction * m as f64).round() as usize).clamp(1, m - 1)
                };
                test.extend_from_slice(&ids[..n_test]);
                train.extend_from_slice(&ids[n_test..]);
            }
            train.sort_unstable();
            test.sort_unstable();
            NodeShard {
                node_id,
                train: batch_of(ds, &train),
                test: batch_of(ds, &test),
            }
        })
        .collect();
    Ok(shards)
}

/// Reads a dataset with header `label,f0,...,f{d-1}`. With `num_classes`
/// given, larger labels are rejected; otherwise it is one past the largest label.
pub fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| SimError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let parse_err = |line: u64, message: String| SimError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let headers = reader.headers()?.clone();
    if headers.get(0).map(str::trim) != Some("label") || headers.len() < 2 {
        return Err(parse_err(1, "header must be `label,f0,...`".into()));
    }
    let dim = headers.len() - 1;

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, csv::Position::line);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, csv::Position::line);
        if record.len() != dim + 1 {
            return Err(parse_err(line, format!("expected {} fields, found {}", dim + 1, record.len())));
        }
        let label: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("label `{}` is not a class index", &record[0])))?;
        if let Some(k) = num_classes {
            if label >= k {
                return Err(parse_err(line, format!("label {label} out of range for {k} classes")));
            }
        }
        let row = record
            .iter()
            .skip(1)
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(line, format!("feature `{s}` is not a finite number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        features.push(Vector::from_vec(row));
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(SimError::Config(format!("{} has no data rows", path.display())));
    }
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(features, labels, k)
}

pub fn write_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| SimError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| SimError::io(path, e);
    let header: Vec<String> = std::iter::once("label".to_string())
        .chain((0..ds.dim()).map(|j| format!("f{j}")))
        .collect();
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for (x, l) in ds.features.iter().zip(&ds.labels) {
        let row: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{l},{}", row.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)
}
