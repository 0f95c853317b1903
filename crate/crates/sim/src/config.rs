//! Flat JSON run configuration and its resolution into typed settings.

use std::fs;
use std::path::{Path, PathBuf};

use fedeq_core::admm::{CachePolicy, FedConfig, GradMode, LambdaInit, ProjectEvery, Sampler};
use fedeq_core::deq::SolverMethod;
use fedeq_core::{Activation, BackwardMode, LossKind, ProjectionSettings, SolverSettings};
use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{Result, SimError};
use crate::fed::ModelConfig;
use crate::metrics::Emit;

/// One JSON document; every key is optional except `rho`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_rep: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_per: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs_rep: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs_per: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", alias = "rounds_T")]
    pub rounds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampler: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", alias = "backward")]
    pub backward_mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<String>,
    /// `anderson` or `plain`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solver: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anderson_m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub damping: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub project_every: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_init: Option<String>,
    /// `keep` or `clear_on_broadcast`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_policy: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub state_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub activation: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_hidden: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recurrent_init_norm: Option<f64>,

    /// `synthetic` or `csv`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_nodes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples_per_node: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heterogeneity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes_per_node: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_separation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node_offset_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_fraction: Option<f64>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub unseen_node_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emit: Option<Emit>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub rounds: Option<usize>,
    pub rho: Option<f64>,
    pub sampler: Option<String>,
    pub backward_mode: Option<String>,
    pub grad_mode: Option<String>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv {
        path: PathBuf,
        num_classes: Option<usize>,
        n_nodes: usize,
        classes_per_node: usize,
    },
}

/// A fully typed, validated run.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub fed: FedConfig,
    pub model: ModelConfig,
    pub data: DataSource,
    pub test_fraction: f64,
    pub unseen_node_fraction: f64,
    pub output_dir: PathBuf,
    pub emit: Emit,
}

fn named<T>(field: &str, value: Option<&str>, default: T, parse: impl Fn(&str) -> Option<T>) -> Result<T> {
    match value {
        None => Ok(default),
        Some(v) => parse(v).ok_or_else(|| SimError::Config(format!("{field}: unknown value `{v}`"))),
    }
}

fn positive(field: &str, value: f64) -> Result<f64> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(SimError::Config(format!("{field}: must be positive, got {value}")))
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SimError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Pretty JSON with keys in declaration order and unset keys omitted.
    pub fn canonical(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain data serializes");
        s.push('\n');
        s
    }

    pub fn apply(&mut self, o: &Overrides) {
        if o.seed.is_some() {
            self.seed = o.seed;
        }
        if o.rounds.is_some() {
            self.rounds = o.rounds;
        }
        if o.rho.is_some() {
            self.rho = o.rho;
        }
        if o.sampler.is_some() {
            self.sampler.clone_from(&o.sampler);
        }
        if o.backward_mode.is_some() {
            self.backward_mode.clone_from(&o.backward_mode);
        }
        if o.grad_mode.is_some() {
            self.grad_mode.clone_from(&o.grad_mode);
        }
        if o.output_dir.is_some() {
            self.output_dir.clone_from(&o.output_dir);
        }
    }

    pub fn resolve(&self) -> Result<Experiment> {
        let d = FedConfig::default();
        let rho = positive("rho", self.rho.ok_or_else(|| SimError::Config("rho: required field is missing".into()))?)?;
        let solver_default = SolverSettings::training();
        let solver = SolverSettings {
            method: named("solver", self.solver.as_deref(), solver_default.method, SolverMethod::from_name)?,
            tol: self.tol.unwrap_or(solver_default.tol),
            max_iters: self.max_iters.unwrap_or(solver_default.max_iters),
            history_m: self.anderson_m.unwrap_or(solver_default.history_m),
            damping: self.damping.unwrap_or(solver_default.damping),
            ..solver_default
        };
        solver.validate().map_err(|e| SimError::Config(format!("solver: {e}")))?;
        let kappa = self.kappa.unwrap_or(ProjectionSettings::default().kappa);
        if !(kappa > 0.0 && kappa < 1.0) {
            return Err(SimError::Config(format!("kappa: must lie in (0, 1), got {kappa}")));
        }
        let fed = FedConfig {
            rho,
            eta_rep: positive("eta_rep", self.eta_rep.unwrap_or(d.eta_rep))?,
            eta_per: positive("eta_per", self.eta_per.unwrap_or(d.eta_per))?,
            epochs_rep: self.epochs_rep.unwrap_or(d.epochs_rep),
            epochs_per: self.epochs_per.unwrap_or(d.epochs_per),
            rounds: self.rounds.unwrap_or(d.rounds),
            sample_fraction: self.sample_fraction.unwrap_or(d.sample_fraction),
            sampler: named("sampler", self.sampler.as_deref(), d.sampler, Sampler::from_name)?,
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            grad_mode: named("grad_mode", self.grad_mode.as_deref(), d.grad_mode, GradMode::from_name)?,
            backward_mode: named("backward_mode", self.backward_mode.as_deref(), d.backward_mode, BackwardMode::from_name)?,
            loss: named("loss", self.loss.as_deref(), d.loss, LossKind::from_name)?,
            solver,
            projection: ProjectionSettings::with_kappa(kappa),
            project_every: named("project_every", self.project_every.as_deref(), d.project_every, ProjectEvery::from_name)?,
            lambda_init: named("lambda_init", self.lambda_init.as_deref(), d.lambda_init, LambdaInit::from_name)?,
            cache_policy: named("cache_policy", self.cache_policy.as_deref(), d.cache_policy, |s| match s {
                "keep" => Some(CachePolicy::Keep),
                "clear_on_broadcast" => Some(CachePolicy::ClearOnBroadcast),
                _ => None,
            })?,
            seed: self.seed.unwrap_or(d.seed),
        };
        if fed.batch_size == 0 {
            return Err(SimError::Config("batch_size: must be at least 1".into()));
        }
        if !(fed.sample_fraction > 0.0 && fed.sample_fraction <= 1.0) {
            return Err(SimError::Config(format!(
                "sample_fraction: must lie in (0, 1], got {}",
                fed.sample_fraction
            )));
        }

        let md = ModelConfig::default();
        let model = ModelConfig {
            state_dim: self.state_dim.unwrap_or(md.state_dim),
            activation: named("activation", self.activation.as_deref(), md.activation, Activation::from_name)?,
            head_hidden: self.head_hidden.clone().unwrap_or(md.head_hidden),
            recurrent_init_norm: self.recurrent_init_norm.unwrap_or(md.recurrent_init_norm),
        };
        if model.state_dim == 0 || model.head_hidden.contains(&0) {
            return Err(SimError::Config("state_dim and head_hidden widths must be positive".into()));
        }

        let sd = SyntheticSpec::default();
        let n_nodes = self.n_nodes.unwrap_or(sd.n_nodes);
        let classes_per_node = self.classes_per_node.unwrap_or(sd.classes_per_node);
        let data = match self.dataset.as_deref().unwrap_or("synthetic") {
            "synthetic" => DataSource::Synthetic(SyntheticSpec {
                n_nodes,
                num_classes: self.num_classes.unwrap_or(sd.num_classes),
                dim: self.dim.unwrap_or(sd.dim),
                samples_per_node: self.samples_per_node.unwrap_or(sd.samples_per_node),
                heterogeneity: self.heterogeneity.unwrap_or(sd.heterogeneity),
                classes_per_node,
                class_separation: self.class_separation.unwrap_or(sd.class_separation),
                node_offset_scale: self.node_offset_scale.unwrap_or(sd.node_offset_scale),
                seed: fed.seed,
            }),
            "csv" => DataSource::Csv {
                path: self
                    .csv_path
                    .clone()
                    .ok_or_else(|| SimError::Config("csv_path: required when dataset is csv".into()))?,
                num_classes: self.num_classes,
                n_nodes,
                classes_per_node,
            },
            other => return Err(SimError::Config(format!("dataset: unknown value `{other}`"))),
        };

        let unseen = self.unseen_node_fraction.unwrap_or(0.0);
        if !(0.0..1.0).contains(&unseen) {
            return Err(SimError::Config(format!("unseen_node_fraction: must lie in [0, 1), got {unseen}")));
        }
        let count = unseen * n_nodes as f64;
        if (count - count.round()).abs() > 1e-9 {
            return Err(SimError::Config(format!(
                "unseen_node_fraction: {unseen} of {n_nodes} nodes is not a whole number"
            )));
        }
        Ok(Experiment {
            fed,
            model,
            data,
            test_fraction: self.test_fraction.unwrap_or(0.2),
            unseen_node_fraction: unseen,
            output_dir: self.output_dir.clone().unwrap_or_else(|| PathBuf::from("fedeq-out")),
            emit: self.emit.unwrap_or(Emit::Csv),
        })
    }
}

impl Experiment {
    pub fn n_nodes(&self) -> usize {
        match &self.data {
            DataSource::Synthetic(s) => s.n_nodes,
            DataSource::Csv { n_nodes, .. } => *n_nodes,
        }
    }

    pub fn unseen_nodes(&self) -> usize {
        (self.unseen_node_fraction * self.n_nodes() as f64).round() as usize
    }
}

/// Worker count from `FEDEQ_THREADS`; 0 (unset) lets rayon decide.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("FEDEQ_THREADS") {
        Err(_) => Ok(0),
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| SimError::Config(format!("FEDEQ_THREADS: `{v}` is not a thread count"))),
    }
}
