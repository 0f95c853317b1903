//! Node-level pieces of ADMM consensus training.
//!
//! Each node `i` holds a local copy `θ_i` of the shared equilibrium layer, a
//! personal head `w_i` and a dual variable `λ_i`. Its augmented Lagrangian is
//!
//! ```text
//! L̃_i = L_i(θ_i, w_i) + ⟨λ_i, θ_i − θ⟩ + (ρ/2)‖θ_i − θ‖²
//! ```
//!
//! The server-side loop that sequences these operations lives in `fedeq-sim`.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::deq::{DeqParams, SolverSettings};
use crate::error::{Error, Result};
use crate::implicit::{BackwardMode, DeqGrads};
use crate::model::{batch_loss, full_gradient, Batch, HeadParams, LossKind, SolveStats, WarmCache};
use crate::projection::{project_inf_matrix, ProjectionSettings};
use crate::tensor::inf_norm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampler {
    UniformWithoutReplacement,
    /// Deterministic rotation; every node participates within `⌈n / |S|⌉` rounds.
    PeriodCyclic,
}

impl Sampler {
    pub fn name(self) -> &'static str {
        match self {
            Sampler::UniformWithoutReplacement => "uniform_without_replacement",
            Sampler::PeriodCyclic => "period_cyclic",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "uniform_without_replacement" | "uniform" => Some(Sampler::UniformWithoutReplacement),
            "period_cyclic" | "cyclic" => Some(Sampler::PeriodCyclic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    Stochastic,
    FullBatch,
}

impl GradMode {
    pub fn name(self) -> &'static str {
        match self {
            GradMode::Stochastic => "stochastic",
            GradMode::FullBatch => "full_batch",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "stochastic" => Some(GradMode::Stochastic),
            "full_batch" => Some(GradMode::FullBatch),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaInit {
    Zeros,
    Random,
}

impl LambdaInit {
    pub fn name(self) -> &'static str {
        match self {
            LambdaInit::Zeros => "zeros",
            LambdaInit::Random => "random",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "zeros" => Some(LambdaInit::Zeros),
            "random" => Some(LambdaInit::Random),
            _ => None,
        }
    }
}

/// When the recurrent matrix is projected back onto the ∞-norm ball.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectEvery {
    Step,
    Epoch,
    /// Projection disabled (ablation only; the layer may stop contracting).
    Never,
}

impl ProjectEvery {
    pub fn name(self) -> &'static str {
        match self {
            ProjectEvery::Step => "step",
            ProjectEvery::Epoch => "epoch",
            ProjectEvery::Never => "never",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "step" => Some(ProjectEvery::Step),
            "epoch" => Some(ProjectEvery::Epoch),
            "never" => Some(ProjectEvery::Never),
            _ => None,
        }
    }
}

/// What happens to a node's warm-start cache when it receives a fresh θ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CachePolicy {
    Keep,
    ClearOnBroadcast,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedConfig {
    pub rho: f64,
    /// Learning rate for θ_i.
    pub eta_rep: f64,
    /// Learning rate for w_i.
    pub eta_per: f64,
    pub epochs_rep: usize,
    pub epochs_per: usize,
    pub rounds: usize,
    pub sample_fraction: f64,
    pub sampler: Sampler,
    pub batch_size: usize,
    pub grad_mode: GradMode,
    pub backward_mode: BackwardMode,
    pub loss: LossKind,
    pub solver: SolverSettings,
    pub projection: ProjectionSettings,
    pub project_every: ProjectEvery,
    pub lambda_init: LambdaInit,
    pub cache_policy: CachePolicy,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            rho: 0.01,
            eta_rep: 0.05,
            eta_per: 0.05,
            epochs_rep: 5,
            epochs_per: 3,
            rounds: 100,
            sample_fraction: 0.1,
            sampler: Sampler::UniformWithoutReplacement,
            batch_size: 10,
            grad_mode: GradMode::Stochastic,
            backward_mode: BackwardMode::ExactIft,
            loss: LossKind::SoftmaxCrossEntropy,
            solver: SolverSettings::training(),
            projection: ProjectionSettings::default(),
            project_every: ProjectEvery::Step,
            lambda_init: LambdaInit::Zeros,
            cache_policy: CachePolicy::Keep,
            seed: 0,
        }
    }
}

impl FedConfig {
    /// Participants per round, `⌊fraction · n⌋`.
    pub fn participants(&self, n_nodes: usize) -> usize {
        libm::floor(self.sample_fraction * n_nodes as f64) as usize
    }

    pub fn validate(&self, n_nodes: usize) -> Result<()> {
        let positive = [
            ("rho", self.rho),
            ("eta_rep", self.eta_rep),
            ("eta_per", self.eta_per),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {value}")));
            }
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "sample_fraction must lie in (0, 1], got {}",
                self.sample_fraction
            )));
        }
        if n_nodes > 0 && self.participants(n_nodes) == 0 {
            return Err(Error::InvalidArgument(format!(
                "sample_fraction {} selects no node out of {n_nodes}",
                self.sample_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        self.solver.validate()?;
        self.projection.validate()
    }

    fn minibatches<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<usize>> {
        match self.grad_mode {
            GradMode::FullBatch => alloc::vec![(0..n).collect()],
            GradMode::Stochastic => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(rng);
                order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
            }
        }
    }
}

/// Everything one edge node keeps between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub node_id: usize,
    pub theta: DeqParams,
    pub head: HeadParams,
    /// λ_i, shaped like θ.
    pub dual: DeqGrads,
    pub train: Batch,
    pub test: Batch,
    pub warm_cache: WarmCache,
}

impl NodeState {
    pub fn new(node_id: usize, theta: DeqParams, head: HeadParams, train: Batch, test: Batch) -> Self {
        let dual = DeqGrads::zeros_like(&theta);
        NodeState {
            node_id,
            theta,
            head,
            dual,
            train,
            test,
            warm_cache: WarmCache::new(),
        }
    }

    /// Draws λ_i entrywise from `U(-scale, scale)`.
    pub fn randomize_dual<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) {
        let DeqGrads {
            recurrent,
            input,
            bias,
        } = &mut self.dual;
        for v in recurrent
            .as_mut_slice()
            .iter_mut()
            .chain(input.as_mut_slice())
            .chain(bias.as_mut_slice())
        {
            *v = rng.random_range(-scale..scale);
        }
    }
}

/// Per-call record of local training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocalLog {
    /// Mean minibatch loss of each epoch, measured before that epoch's steps.
    pub epoch_losses: Vec<f64>,
    pub stats: SolveStats,
}

/// Unweighted mean of the participants' θ_i.
pub fn aggregate(participants: &[&DeqParams]) -> Result<DeqParams> {
    let (first, rest) = participants
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("cannot aggregate an empty participant set".into()))?;
    // first + mean offset from first
    let mut offsets = DeqGrads::zeros_like(first);
    for p in rest {
        if !p.same_shape(first) {
            return Err(Error::ShapeMismatch {
                op: "aggregate",
                expected: first.recurrent.shape(),
                found: p.recurrent.shape(),
            });
        }
        offsets.axpy(1.0, &DeqGrads::difference(p, first));
    }
    let mut mean = (*first).clone();
    mean.axpy(1.0 / participants.len() as f64, &offsets);
    Ok(mean)
}

/// Node ids participating in `round`, ascending.
pub fn sample_nodes<R: Rng + ?Sized>(
    sampler: Sampler,
    n: usize,
    fraction: f64,
    round: usize,
    rng: &mut R,
) -> Vec<usize> {
    let count = (libm::floor(fraction * n as f64) as usize).clamp(1, n.max(1)).min(n);
    let mut ids = match sampler {
        Sampler::UniformWithoutReplacement => index::sample(rng, n, count).into_vec(),
        Sampler::PeriodCyclic => {
            let start = (round % n.max(1)) * count % n.max(1);
            (0..count).map(|j| (start + j) % n).collect()
        }
    };
    ids.sort_unstable();
    ids
}

/// Minimizes `L_i(θ, w_i)` over `w_i` with θ frozen at the broadcast value,
/// starting from the node's current head.
pub fn personalize_update<R: Rng + ?Sized>(
    node: &mut NodeState,
    theta_broadcast: &DeqParams,
    cfg: &FedConfig,
    rng: &mut R,
) -> Result<LocalLog> {
    let mut log = LocalLog::default();
    if cfg.epochs_per == 0 {
        return Ok(log);
    }
    if node.train.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "node {} has no training data to personalize on",
            node.node_id
        )));
    }
    for _ in 0..cfg.epochs_per {
        let mut epoch_loss = 0.0;
        let batches = cfg.minibatches(node.train.len(), rng);
        for positions in &batches {
            let mb = node.train.select(positions);
            // θ gradients are discarded here, so skip the adjoint solve
            let out = full_gradient(
                theta_broadcast,
                &node.head,
                &mb,
                cfg.loss,
                BackwardMode::Jfb,
                &cfg.solver,
                Some(&mut node.warm_cache),
            )?;
            node.head.axpy(-cfg.eta_per, &out.head);
            epoch_loss += out.mean_loss;
            log.stats.merge(out.stats);
        }
        log.epoch_losses.push(epoch_loss / batches.len() as f64);
    }
    Ok(log)
}

/// Gradient of the local augmented Lagrangian with respect to θ_i, given the
/// loss gradient: `∇L_i + λ_i + ρ(θ_i − θ)`.
pub fn corrected_gradient(loss_grad: &DeqGrads, node: &NodeState, theta: &DeqParams, rho: f64) -> DeqGrads {
    let mut g = loss_grad.clone();
    g.axpy(1.0, &node.dual);
    g.axpy(rho, &DeqGrads::difference(&node.theta, theta));
    g
}

fn project_recurrent(theta: &mut DeqParams, settings: &ProjectionSettings) -> Result<()> {
    if inf_norm(&theta.recurrent) > settings.kappa {
        theta.recurrent = project_inf_matrix(&theta.recurrent, settings)?;
    }
    Ok(())
}

/// Gradient steps on the local augmented Lagrangian with respect to θ_i, using
/// the dual-corrected gradient. A node without training data sees only the
/// proximal and dual terms.
pub fn rep_update<R: Rng + ?Sized>(
    node: &mut NodeState,
    theta_broadcast: &DeqParams,
    cfg: &FedConfig,
    rng: &mut R,
) -> Result<LocalLog> {
    if !node.theta.same_shape(theta_broadcast) || !node.dual.same_shape(theta_broadcast) {
        return Err(Error::ShapeMismatch {
            op: "rep_update",
            expected: theta_broadcast.recurrent.shape(),
            found: node.theta.recurrent.shape(),
        });
    }
    let mut log = LocalLog::default();
    for _ in 0..cfg.epochs_rep {
        let batches = if node.train.is_empty() {
            alloc::vec![Vec::new()]
        } else {
            cfg.minibatches(node.train.len(), rng)
        };
        let mut epoch_loss = 0.0;
        for positions in &batches {
            let loss_grad = if positions.is_empty() {
                DeqGrads::zeros_like(&node.theta)
            } else {
                let mb = node.train.select(positions);
                let out = full_gradient(
                    &node.theta,
                    &node.head,
                    &mb,
                    cfg.loss,
                    cfg.backward_mode,
                    &cfg.solver,
                    Some(&mut node.warm_cache),
                )?;
                epoch_loss += out.mean_loss;
                log.stats.merge(out.stats);
                out.theta
            };
            let g = corrected_gradient(&loss_grad, node, theta_broadcast, cfg.rho);
            node.theta.axpy(-cfg.eta_rep, &g);
            if cfg.project_every == ProjectEvery::Step {
                project_recurrent(&mut node.theta, &cfg.projection)?;
            }
        }
        if cfg.project_every == ProjectEvery::Epoch {
            project_recurrent(&mut node.theta, &cfg.projection)?;
        }
        log.epoch_losses.push(epoch_loss / batches.len() as f64);
    }
    Ok(log)
}

/// Dual ascent: `λ_i ← λ_i + ρ(θ_i − θ)`.
pub fn dual_update(node: &mut NodeState, theta_new: &DeqParams, rho: f64) {
    let gap = DeqGrads::difference(&node.theta, theta_new);
    node.dual.axpy(rho, &gap);
}

/// Value and parts of one node's augmented Lagrangian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LagrangianTerms {
    /// Full-batch training loss `L_i(θ_i, w_i)`.
    pub loss: f64,
    /// `⟨λ_i, θ_i − θ⟩`
    pub dual_term: f64,
    /// `(ρ/2)‖θ_i − θ‖²`
    pub penalty: f64,
}

impl LagrangianTerms {
    pub fn value(&self) -> f64 {
        self.loss + self.dual_term + self.penalty
    }
}

/// The penalty terms of `L̃_i` for a known loss value.
pub fn lagrangian_terms(node: &NodeState, theta: &DeqParams, rho: f64, loss: f64) -> LagrangianTerms {
    let gap = DeqGrads::difference(&node.theta, theta);
    LagrangianTerms {
        loss,
        dual_term: node.dual.dot(&gap),
        penalty: 0.5 * rho * gap.norm_sq(),
    }
}

/// `L̃_i` with `L_i` evaluated full-batch on the node's training shard.
pub fn aug_lagrangian_local(
    node: &NodeState,
    theta: &DeqParams,
    rho: f64,
    loss_kind: LossKind,
    solver: &SolverSettings,
) -> Result<(LagrangianTerms, SolveStats)> {
    let (loss, stats) = batch_loss(&node.theta, &node.head, &node.train, loss_kind, solver, Some(&node.warm_cache))?;
    Ok((lagrangian_terms(node, theta, rho, loss), stats))
}

/// Sum of `L̃_i` over every node, in slice order.
pub fn aug_lagrangian_global(
    nodes: &[NodeState],
    theta: &DeqParams,
    rho: f64,
    loss_kind: LossKind,
    solver: &SolverSettings,
) -> Result<f64> {
    let mut total = 0.0;
    for node in nodes {
        total += aug_lagrangian_local(node, theta, rho, loss_kind, solver)?.0.value();
    }
    Ok(total)
}
