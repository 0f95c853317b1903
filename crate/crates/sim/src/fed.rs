//! Round orchestration for FeDEQ and the FedAvg baselines.
//!
//! Sampled nodes run their local updates on a rayon pool. Every node draws
//! randomness from its own stream keyed by `(seed, node_id, round)` and all
//! cross-node reductions run in ascending node order, so results do not depend
//! on the worker count.

use fedeq_core::admm::{
    aggregate, aug_lagrangian_local, dual_update, personalize_update, rep_update, sample_nodes, CachePolicy,
    FedConfig, LambdaInit, NodeState, ProjectEvery,
};
use fedeq_core::implicit::DeqGrads;
use fedeq_core::model::{
    count_correct, full_gradient, head_backward, head_forward, loss_and_grad, HeadGrads, SolveStats,
};
use fedeq_core::projection::project_inf_matrix;
use fedeq_core::tensor::inf_norm;
use fedeq_core::{Activation, Batch, DeqParams, HeadParams, SolverSettings, WarmCache};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::data::NodeShard;
use crate::error::{Result, SimError};
use crate::metrics::RoundMetrics;

/// Shapes and initialization of the per-node model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// `d1`
    pub state_dim: usize,
    pub activation: Activation,
    /// Hidden widths of the head between `d1` and the class logits.
    pub head_hidden: Vec<usize>,
    /// `‖B‖∞` of the initial recurrent matrix.
    pub recurrent_init_norm: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            state_dim: 16,
            activation: Activation::Tanh,
            head_hidden: vec![32],
            recurrent_init_norm: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn head_widths(&self, num_classes: usize) -> Vec<usize> {
        let mut w = vec![self.state_dim];
        w.extend(&self.head_hidden);
        w.push(num_classes);
        w
    }

    pub fn init_theta(&self, input_dim: usize, seed: u64) -> DeqParams {
        let mut rng = rng_stream(seed, Stream::Init, 0, 0);
        DeqParams::random(input_dim, self.state_dim, self.activation, self.recurrent_init_norm, &mut rng)
    }

    pub fn init_head(&self, num_classes: usize, rng: &mut ChaCha8Rng) -> HeadParams {
        HeadParams::random(&self.head_widths(num_classes), self.activation, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Server = 2,
    Node = 3,
    Head = 4,
    Dual = 5,
    Unseen = 6,
}

/// Independent generator for `(seed, stream, a, b)`.
pub fn rng_stream(seed: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, word) in key.chunks_mut(8).zip([seed, stream as u64, a, b]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

pub fn thread_pool(threads: usize) -> Result<ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| SimError::Config(format!("threads: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Each node's own `(θ_i, w_i)`.
    Personalized,
    /// The server's θ under each node's head.
    GlobalThetaLocalHead,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn accuracy(theta: &DeqParams, head: &HeadParams, test: &Batch, solver: &SolverSettings) -> Result<(f64, SolveStats)> {
    if test.is_empty() {
        return Err(SimError::Config("evaluation needs a non-empty test shard".into()));
    }
    let (correct, stats) = count_correct(theta, head, test, solver)?;
    Ok((correct as f64 / test.len() as f64, stats))
}

fn validate_shards(shards: &[NodeShard], num_classes: usize) -> Result<usize> {
    let dim = shards
        .iter()
        .find_map(|s| s.train.inputs.first().map(|x| x.len()))
        .ok_or_else(|| SimError::Config("no training data".into()))?;
    for s in shards {
        s.train.validate_labels(num_classes)?;
        s.test.validate_labels(num_classes)?;
        if s.train.inputs.iter().chain(&s.test.inputs).any(|x| x.len() != dim) {
            return Err(SimError::Config(format!("node {} has inputs of the wrong width", s.node_id)));
        }
    }
    Ok(dim)
}

/// Server and node state of a FeDEQ run.
pub struct Federation {
    pub cfg: FedConfig,
    pub model: ModelConfig,
    pub num_classes: usize,
    /// The consensus variable as last broadcast.
    pub theta: DeqParams,
    /// Indexed by node id.
    pub nodes: Vec<NodeState>,
    pub round: usize,
    /// Participants of the previous round; `None` before round 0.
    previous: Option<Vec<usize>>,
    monitor: SolverSettings,
    pool: ThreadPool,
}

impl Federation {
    /// Node ids are the shard positions.
    pub fn new(cfg: FedConfig, model: ModelConfig, shards: Vec<NodeShard>, num_classes: usize, threads: usize) -> Result<Self> {
        let n = shards.len();
        cfg.validate(n)?;
        if n == 0 {
            return Err(SimError::Config("a federation needs at least one node".into()));
        }
        let dim = validate_shards(&shards, num_classes)?;
        let theta = model.init_theta(dim, cfg.seed);
        let nodes = shards
            .into_iter()
            .enumerate()
            .map(|(id, shard)| {
                let head = model.init_head(num_classes, &mut rng_stream(cfg.seed, Stream::Head, id as u64, 0));
                let mut node = NodeState::new(id, theta.clone(), head, shard.train, shard.test);
                if cfg.lambda_init == LambdaInit::Random {
                    node.randomize_dual(1e-2, &mut rng_stream(cfg.seed, Stream::Dual, id as u64, 0));
                }
                node
            })
            .collect();
        let monitor = SolverSettings {
            tol: 1e-10,
            max_iters: cfg.solver.max_iters.max(1000),
            ..cfg.solver.clone()
        };
        Ok(Federation {
            cfg,
            model,
            num_classes,
            theta,
            nodes,
            round: 0,
            previous: None,
            monitor,
            pool: thread_pool(threads)?,
        })
    }

    /// Solver used for the Lagrangian and loss columns of the metrics.
    pub fn set_monitor_solver(&mut self, solver: SolverSettings) {
        self.monitor = solver;
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// What the server would broadcast next: the mean over the most recent
    /// participants.
    pub fn pending_theta(&self) -> Result<DeqParams> {
        match &self.previous {
            None => Ok(self.theta.clone()),
            Some(ids) => {
                let thetas: Vec<&DeqParams> = ids.iter().map(|&i| &self.nodes[i].theta).collect();
                Ok(aggregate(&thetas)?)
            }
        }
    }

    /// One global iteration: aggregate the previous participants, sample, then
    /// personalize, update θ_i and ascend the dual on every sampled node.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        self.theta = self.pending_theta()?;
        let round = self.round;
        let n = self.nodes.len();
        let mut server_rng = rng_stream(self.cfg.seed, Stream::Server, round as u64, 0);
        let sampled = sample_nodes(self.cfg.sampler, n, self.cfg.sample_fraction, round, &mut server_rng);
        let mut in_round = vec![false; n];
        sampled.iter().for_each(|&i| in_round[i] = true);

        let (cfg, theta) = (&self.cfg, &self.theta);
        let results: Vec<Result<SolveStats>> = self.pool.install(|| {
            self.nodes
                .par_iter_mut()
                .filter(|node| in_round[node.node_id])
                .map(|node| {
                    let mut rng = rng_stream(cfg.seed, Stream::Node, node.node_id as u64, round as u64);
                    if cfg.cache_policy == CachePolicy::ClearOnBroadcast {
                        node.warm_cache.clear();
                    }
                    let mut stats = personalize_update(node, theta, cfg, &mut rng)?.stats;
                    stats.merge(rep_update(node, theta, cfg, &mut rng)?.stats);
                    dual_update(node, theta, cfg.rho);
                    Ok(stats)
                })
                .collect()
        });
        let mut train_stats = SolveStats::default();
        for r in results {
            train_stats.merge(r?);
        }
        self.previous = Some(sampled.clone());
        self.round += 1;
        self.metrics(round, sampled, train_stats)
    }

    fn metrics(&self, round: usize, sampled: Vec<usize>, train_stats: SolveStats) -> Result<RoundMetrics> {
        let theta = self.pending_theta()?;
        let (cfg, monitor) = (&self.cfg, &self.monitor);
        let per_node: Vec<Result<(f64, f64, f64, f64)>> = self.pool.install(|| {
            self.nodes
                .par_iter()
                .map(|node| {
                    let (terms, _) = aug_lagrangian_local(node, &theta, cfg.rho, cfg.loss, monitor)?;
                    let (acc, _) = accuracy(&node.theta, &node.head, &node.test, &cfg.solver)?;
                    let residual = DeqGrads::difference(&node.theta, &theta).max_abs();
                    Ok((terms.loss, terms.value(), residual, acc))
                })
                .collect()
        });
        let per_node = per_node.into_iter().collect::<Result<Vec<_>>>()?;
        let n = per_node.len() as f64;
        let accs: Vec<f64> = per_node.iter().map(|r| r.3).collect();
        let (mean_acc, std_acc) = mean_std(&accs);
        Ok(RoundMetrics {
            round,
            mean_train_loss: per_node.iter().map(|r| r.0).sum::<f64>() / n,
            global_aug_lagrangian: per_node.iter().map(|r| r.1).sum(),
            consensus_residual_max: per_node.iter().map(|r| r.2).fold(0.0, f64::max),
            consensus_residual_mean: per_node.iter().map(|r| r.2).sum::<f64>() / n,
            mean_test_accuracy: mean_acc,
            accuracy_std: std_acc,
            mean_fp_iterations: train_stats.mean_iterations(),
            participating_nodes: sampled,
        })
    }

    /// Runs `rounds` rounds, handing each record to `sink` as soon as it exists.
    pub fn run<F>(&mut self, rounds: usize, mut sink: F) -> Result<Vec<RoundMetrics>>
    where
        F: FnMut(&RoundMetrics) -> Result<()>,
    {
        let mut out = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let m = self.run_round()?;
            sink(&m)?;
            out.push(m);
        }
        Ok(out)
    }

    pub fn node_accuracies(&self, mode: EvalMode) -> Result<Vec<f64>> {
        let theta = self.pending_theta()?;
        let solver = &self.cfg.solver;
        let accs: Vec<Result<f64>> = self.pool.install(|| {
            self.nodes
                .par_iter()
                .map(|node| {
                    let th = match mode {
                        EvalMode::Personalized => &node.theta,
                        EvalMode::GlobalThetaLocalHead => &theta,
                    };
                    Ok(accuracy(th, &node.head, &node.test, solver)?.0)
                })
                .collect()
        });
        accs.into_iter().collect()
    }

    /// Mean and standard deviation of per-node test accuracy.
    pub fn evaluate(&self, mode: EvalMode) -> Result<(f64, f64)> {
        Ok(mean_std(&self.node_accuracies(mode)?))
    }
}

/// Fits fresh heads on nodes that never took part in training, with θ frozen,
/// and returns each node's test accuracy.
pub fn adapt_unseen(
    theta: &DeqParams,
    model: &ModelConfig,
    num_classes: usize,
    fresh: &[NodeShard],
    cfg: &FedConfig,
    threads: usize,
) -> Result<Vec<f64>> {
    let pool = thread_pool(threads)?;
    let accs: Vec<Result<f64>> = pool.install(|| {
        fresh
            .par_iter()
            .map(|shard| {
                let id = shard.node_id as u64;
                let head = model.init_head(num_classes, &mut rng_stream(cfg.seed, Stream::Unseen, id, 0));
                let mut node = NodeState::new(shard.node_id, theta.clone(), head, shard.train.clone(), shard.test.clone());
                let mut rng = rng_stream(cfg.seed, Stream::Unseen, id, 1);
                personalize_update(&mut node, theta, cfg, &mut rng)?;
                Ok(accuracy(theta, &node.head, &node.test, &cfg.solver)?.0)
            })
            .collect()
    });
    accs.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineModel {
    Deq,
    /// Two dense layers of width `d1` in place of the equilibrium layer.
    ExplicitMlp,
}

/// A whole (non-personalized) model trained by FedAvg.
#[derive(Debug, Clone, PartialEq)]
pub enum GlobalModel {
    Deq { theta: DeqParams, head: HeadParams },
    Mlp { body: HeadParams, head: HeadParams },
}

enum ModelGrads {
    Deq(DeqGrads, HeadGrads),
    Mlp(HeadGrads, HeadGrads),
}

fn mean_into<'a>(dst: &mut [f64], sources: impl Iterator<Item = &'a [f64]>) {
    dst.iter_mut().for_each(|v| *v = 0.0);
    let mut count = 0.0;
    for src in sources {
        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        count += 1.0;
    }
    dst.iter_mut().for_each(|v| *v /= count);
}

fn mean_head(heads: &[&HeadParams]) -> HeadParams {
    let mut out = heads[0].clone();
    for (k, layer) in out.layers.iter_mut().enumerate() {
        mean_into(layer.weight.as_mut_slice(), heads.iter().map(|h| h.layers[k].weight.as_slice()));
        mean_into(layer.bias.as_mut_slice(), heads.iter().map(|h| h.layers[k].bias.as_slice()));
    }
    out
}

fn head_dist_inf(a: &HeadParams, b: &HeadParams) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

impl GlobalModel {
    pub fn init(kind: BaselineModel, model: &ModelConfig, input_dim: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = rng_stream(seed, Stream::Head, u64::MAX, 0);
        let head = model.init_head(num_classes, &mut rng);
        match kind {
            BaselineModel::Deq => GlobalModel::Deq {
                theta: model.init_theta(input_dim, seed),
                head,
            },
            BaselineModel::ExplicitMlp => {
                let d1 = model.state_dim;
                let mut body = HeadParams::random(&[input_dim, d1, d1], model.activation, &mut rng_stream(seed, Stream::Init, 1, 0));
                body.layers.iter_mut().for_each(|l| l.activation = Some(model.activation));
                GlobalModel::Mlp { body, head }
            }
        }
    }

    fn gradient(&self, batch: &Batch, cfg: &FedConfig, cache: &mut WarmCache) -> Result<(ModelGrads, f64, SolveStats)> {
        match self {
            GlobalModel::Deq { theta, head } => {
                let out = full_gradient(theta, head, batch, cfg.loss, cfg.backward_mode, &cfg.solver, Some(cache))?;
                Ok((ModelGrads::Deq(out.theta, out.head), out.mean_loss, out.stats))
            }
            GlobalModel::Mlp { body, head } => {
                let mut g_body = HeadGrads::zeros_like(body);
                let mut g_head = HeadGrads::zeros_like(head);
                let mut total = 0.0;
                let mut order: Vec<usize> = (0..batch.len()).collect();
                order.sort_by_key(|&p| batch.sample_ids[p]);
                for p in order {
                    let (h, body_tape) = head_forward(body, &batch.inputs[p])?;
                    let (out, head_tape) = head_forward(head, &h)?;
                    let (loss, dl_dout) = loss_and_grad(cfg.loss, &out, batch.labels[p]);
                    let (hg, dl_dh) = head_backward(head, &head_tape, &dl_dout);
                    let (bg, _) = head_backward(body, &body_tape, &dl_dh);
                    g_head.axpy(1.0, &hg);
                    g_body.axpy(1.0, &bg);
                    total += loss;
                }
                let inv = 1.0 / batch.len() as f64;
                g_head.scale(inv);
                g_body.scale(inv);
                Ok((ModelGrads::Mlp(g_body, g_head), total * inv, SolveStats::default()))
            }
        }
    }

    fn step(&mut self, grads: &ModelGrads, cfg: &FedConfig) {
        match (self, grads) {
            (GlobalModel::Deq { theta, head }, ModelGrads::Deq(gt, gh)) => {
                theta.axpy(-cfg.eta_rep, gt);
                head.axpy(-cfg.eta_per, gh);
            }
            (GlobalModel::Mlp { body, head }, ModelGrads::Mlp(gb, gh)) => {
                body.axpy(-cfg.eta_rep, gb);
                head.axpy(-cfg.eta_per, gh);
            }
            _ => unreachable!("gradient kind follows the model kind"),
        }
    }

    fn project(&mut self, cfg: &FedConfig) -> Result<()> {
        if let GlobalModel::Deq { theta, .. } = self {
            if inf_norm(&theta.recurrent) > cfg.projection.kappa {
                theta.recurrent = project_inf_matrix(&theta.recurrent, &cfg.projection)?;
            }
        }
        Ok(())
    }

    fn average(models: &[&GlobalModel]) -> GlobalModel {
        let mut out = models[0].clone();
        match &mut out {
            GlobalModel::Deq { theta, head } => {
                let parts: Vec<(&DeqParams, &HeadParams)> = models
                    .iter()
                    .map(|m| match m {
                        GlobalModel::Deq { theta, head } => (theta, head),
                        GlobalModel::Mlp { .. } => unreachable!("models share a kind"),
                    })
                    .collect();
                mean_into(theta.recurrent.as_mut_slice(), parts.iter().map(|p| p.0.recurrent.as_slice()));
                mean_into(theta.input.as_mut_slice(), parts.iter().map(|p| p.0.input.as_slice()));
                mean_into(theta.bias.as_mut_slice(), parts.iter().map(|p| p.0.bias.as_slice()));
                *head = mean_head(&parts.iter().map(|p| p.1).collect::<Vec<_>>());
            }
            GlobalModel::Mlp { body, head } => {
                let parts: Vec<(&HeadParams, &HeadParams)> = models
                    .iter()
                    .map(|m| match m {
                        GlobalModel::Mlp { body, head } => (body, head),
                        GlobalModel::Deq { .. } => unreachable!("models share a kind"),
                    })
                    .collect();
                *body = mean_head(&parts.iter().map(|p| p.0).collect::<Vec<_>>());
                *head = mean_head(&parts.iter().map(|p| p.1).collect::<Vec<_>>());
            }
        }
        out
    }

    /// Largest entrywise gap in the shared representation.
    fn representation_gap(&self, other: &GlobalModel) -> f64 {
        match (self, other) {
            (GlobalModel::Deq { theta: a, .. }, GlobalModel::Deq { theta: b, .. }) => DeqGrads::difference(a, b).max_abs(),
            (GlobalModel::Mlp { body: a, .. }, GlobalModel::Mlp { body: b, .. }) => head_dist_inf(a, b),
            _ => f64::INFINITY,
        }
    }

    /// Mean loss (cold starts) and accuracy on a batch.
    pub fn evaluate(&self, batch: &Batch, cfg: &FedConfig) -> Result<(f64, f64, SolveStats)> {
        if batch.is_empty() {
            return Ok((0.0, 0.0, SolveStats::default()));
        }
        let mut stats = SolveStats::default();
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (x, &label) in batch.inputs.iter().zip(&batch.labels) {
            let out = match self {
                GlobalModel::Deq { theta, head } => {
                    let f = fedeq_core::model::forward(theta, head, x, &cfg.solver, &fedeq_core::Vector::zeros(theta.state_dim()))?;
                    stats.record(&f.fixed_point);
                    f.output
                }
                GlobalModel::Mlp { body, head } => head_forward(head, &head_forward(body, x)?.0)?.0,
            };
            loss += loss_and_grad(cfg.loss, &out, label).0;
            correct += usize::from(out.argmax() == Some(label));
        }
        let n = batch.len() as f64;
        Ok((loss / n, correct as f64 / n, stats))
    }
}

/// Training effort and metrics of a FedAvg run.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRun {
    pub metrics: Vec<RoundMetrics>,
    /// Forward solves during local training and evaluation.
    pub fp_solves: usize,
    pub fp_failures: usize,
    pub final_accuracy: f64,
}

impl BaselineRun {
    pub fn failure_rate(&self) -> f64 {
        if self.fp_solves == 0 {
            0.0
        } else {
            self.fp_failures as f64 / self.fp_solves as f64
        }
    }
}

/// Classic FedAvg: every parameter is trained locally and averaged; nothing
/// stays personal. Local steps use `eta_rep` for the representation and
/// `eta_per` for the head, for `epochs_rep` epochs.
pub struct FedAvg {
    pub cfg: FedConfig,
    pub model: GlobalModel,
    pub shards: Vec<NodeShard>,
    pub round: usize,
    pub stats: SolveStats,
    pool: ThreadPool,
}

impl FedAvg {
    pub fn new(
        cfg: FedConfig,
        model_cfg: &ModelConfig,
        kind: BaselineModel,
        shards: Vec<NodeShard>,
        num_classes: usize,
        threads: usize,
    ) -> Result<Self> {
        cfg.validate(shards.len())?;
        let dim = validate_shards(&shards, num_classes)?;
        let model = GlobalModel::init(kind, model_cfg, dim, num_classes, cfg.seed);
        Ok(FedAvg {
            cfg,
            model,
            shards,
            round: 0,
            stats: SolveStats::default(),
            pool: thread_pool(threads)?,
        })
    }

    fn local_train(&self, shard: &NodeShard, round: usize) -> Result<(GlobalModel, SolveStats)> {
        let cfg = &self.cfg;
        let mut local = self.model.clone();
        let mut stats = SolveStats::default();
        let mut cache = WarmCache::new();
        let mut rng = rng_stream(cfg.seed, Stream::Node, shard.node_id as u64, round as u64);
        let n = shard.train.len();
        for _ in 0..cfg.epochs_rep {
            let batches: Vec<Vec<usize>> = match cfg.grad_mode {
                fedeq_core::admm::GradMode::FullBatch => vec![(0..n).collect()],
                fedeq_core::admm::GradMode::Stochastic => {
                    let mut order: Vec<usize> = (0..n).collect();
                    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
                    order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
                }
            };
            for positions in batches.iter().filter(|b| !b.is_empty()) {
                let (g, _, s) = local.gradient(&shard.train.select(positions), cfg, &mut cache)?;
                stats.merge(s);
                local.step(&g, cfg);
                if cfg.project_every == ProjectEvery::Step {
                    local.project(cfg)?;
                }
            }
            if cfg.project_every == ProjectEvery::Epoch {
                local.project(cfg)?;
            }
        }
        Ok((local, stats))
    }

    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let round = self.round;
        let n = self.shards.len();
        let mut server_rng = rng_stream(self.cfg.seed, Stream::Server, round as u64, 0);
        let sampled = sample_nodes(self.cfg.sampler, n, self.cfg.sample_fraction, round, &mut server_rng);
        let this = &*self;
        let locals: Vec<Result<(GlobalModel, SolveStats)>> = self
            .pool
            .install(|| sampled.par_iter().map(|&i| this.local_train(&this.shards[i], round)).collect());
        let locals = locals.into_iter().collect::<Result<Vec<_>>>()?;
        let mut train_stats = SolveStats::default();
        locals.iter().for_each(|(_, s)| train_stats.merge(*s));

        let new_model = GlobalModel::average(&locals.iter().map(|(m, _)| m).collect::<Vec<_>>());
        let gaps: Vec<f64> = locals.iter().map(|(m, _)| m.representation_gap(&new_model)).collect();
        self.model = new_model;
        self.stats.merge(train_stats);

        let (model, cfg) = (&self.model, &self.cfg);
        let evals: Vec<Result<(f64, f64, SolveStats)>> = self.pool.install(|| {
            self.shards
                .par_iter()
                .map(|s| {
                    let (loss, _, mut stats) = model.evaluate(&s.train, cfg)?;
                    let (_, acc, test_stats) = model.evaluate(&s.test, cfg)?;
                    stats.merge(test_stats);
                    Ok((loss, acc, stats))
                })
                .collect()
        });
        let evals = evals.into_iter().collect::<Result<Vec<_>>>()?;
        evals.iter().for_each(|e| self.stats.merge(e.2));
        let accs: Vec<f64> = evals.iter().map(|e| e.1).collect();
        let (mean_acc, std_acc) = mean_std(&accs);
        let total_loss: f64 = evals.iter().map(|e| e.0).sum();
        self.round += 1;
        Ok(RoundMetrics {
            round,
            mean_train_loss: total_loss / n as f64,
            global_aug_lagrangian: total_loss,
            consensus_residual_max: gaps.iter().copied().fold(0.0, f64::max),
            consensus_residual_mean: gaps.iter().sum::<f64>() / n as f64,
            mean_test_accuracy: mean_acc,
            accuracy_std: std_acc,
            mean_fp_iterations: train_stats.mean_iterations(),
            participating_nodes: sampled,
        })
    }

    pub fn run<F>(&mut self, rounds: usize, mut sink: F) -> Result<BaselineRun>
    where
        F: FnMut(&RoundMetrics) -> Result<()>,
    {
        let mut metrics = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let m = self.run_round()?;
            sink(&m)?;
            metrics.push(m);
        }
        Ok(BaselineRun {
            final_accuracy: metrics.last().map_or(0.0, |m| m.mean_test_accuracy),
            metrics,
            fp_solves: self.stats.solves,
            fp_failures: self.stats.failures,
        })
    }
}
