//! The composite predictor `f(x) = h_w(z*(x; θ))`: an equilibrium representation
//! followed by a personalized dense head.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::activation::Activation;
use crate::deq::{solve, DeqParams, FixedPointResult, SolverSettings};
use crate::error::{Error, Result};
use crate::implicit::{grad_theta, BackwardMode, DeqGrads};
use crate::tensor::{matvec, matvec_t, Matrix, Vector};

/// Fixed points from earlier solves, keyed by global sample id.
pub type WarmCache = BTreeMap<usize, Vector>;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out × in`
    pub weight: Matrix,
    pub bias: Vector,
    /// `None` for a linear (output) layer.
    pub activation: Option<Activation>,
}

/// The personalized head `h_w`: a chain of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub layers: Vec<DenseLayer>,
}

impl HeadParams {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("a head needs at least one layer".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.weight.rows() {
                return Err(Error::dims("HeadParams::new (bias)", layer.weight.rows(), layer.bias.len()));
            }
            if let Some(prev) = k.checked_sub(1).map(|p| &layers[p]) {
                if layer.weight.cols() != prev.weight.rows() {
                    return Err(Error::dims("HeadParams::new (chain)", prev.weight.rows(), layer.weight.cols()));
                }
            }
        }
        Ok(HeadParams { layers })
    }

    /// Random dense stack over `widths = [in, hidden.., out]`; every layer but
    /// the last uses `hidden_activation`. Glorot-uniform weights, zero biases.
    pub fn random<R: Rng + ?Sized>(widths: &[usize], hidden_activation: Activation, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
                DenseLayer {
                    weight: Matrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-limit..limit)),
                    bias: Vector::zeros(fan_out),
                    activation: (k < last).then_some(hidden_activation),
                }
            })
            .collect();
        HeadParams { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.rows()
    }

    /// `w += alpha * grads`
    pub fn axpy(&mut self, alpha: f64, grads: &HeadGrads) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weight.axpy(alpha, &g.weight);
            layer.bias.axpy(alpha, &g.bias);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(l.bias.as_slice()).copied())
    }

    /// Mutable flat view of every weight then bias, layer by layer.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.as_mut_slice().iter_mut().chain(l.bias.as_mut_slice()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub layers: Vec<LayerGrad>,
}

impl HeadGrads {
    pub fn zeros_like(head: &HeadParams) -> Self {
        HeadGrads {
            layers: head
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: Vector::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &HeadGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.axpy(alpha, &b.weight);
            a.bias.axpy(alpha, &b.bias);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for l in &mut self.layers {
            l.weight.scale(alpha);
            l.bias.scale(alpha);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(l.bias.as_slice()).copied())
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, v| f64::max(m, v.abs()))
    }
}

/// Per-layer inputs and pre-activations recorded by [`head_forward`].
#[derive(Debug, Clone)]
pub struct HeadTape {
    inputs: Vec<Vector>,
    pre: Vec<Vector>,
}

pub fn head_forward(w: &HeadParams, z: &Vector) -> Result<(Vector, HeadTape)> {
    if z.len() != w.input_dim() {
        return Err(Error::dims("head_forward", w.input_dim(), z.len()));
    }
    let mut tape = HeadTape {
        inputs: Vec::with_capacity(w.layers.len()),
        pre: Vec::with_capacity(w.layers.len()),
    };
    let mut a = z.clone();
    for layer in &w.layers {
        let mut pre = matvec(&layer.weight, &a)?;
        pre.axpy(1.0, &layer.bias);
        let out = match layer.activation {
            Some(act) => act.apply(&pre),
            None => pre.clone(),
        };
        tape.inputs.push(a);
        tape.pre.push(pre);
        a = out;
    }
    Ok((a, tape))
}

/// Reverse pass through the head. Returns the parameter gradients and `∂L/∂z`.
pub fn head_backward(w: &HeadParams, tape: &HeadTape, dl_dout: &Vector) -> (HeadGrads, Vector) {
    let mut grads = HeadGrads::zeros_like(w);
    let mut delta = dl_dout.clone();
    for (k, layer) in w.layers.iter().enumerate().rev() {
        if let Some(act) = layer.activation {
            delta = delta.hadamard(&act.derivative_vec(&tape.pre[k]));
        }
        grads.layers[k].weight = Matrix::outer(&delta, &tape.inputs[k]);
        grads.layers[k].bias = delta.clone();
        delta = matvec_t(&layer.weight, &delta).expect("tape matches head");
    }
    (grads, delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    SoftmaxCrossEntropy,
    /// Squared error against the one-hot target, averaged over outputs.
    MeanSquaredError,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            LossKind::MeanSquaredError => "mean_squared_error",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "softmax_cross_entropy" => Some(LossKind::SoftmaxCrossEntropy),
            "mean_squared_error" => Some(LossKind::MeanSquaredError),
            _ => None,
        }
    }
}

/// Loss of one prediction and its gradient with respect to the output.
pub fn loss_and_grad(kind: LossKind, output: &Vector, label: usize) -> (f64, Vector) {
    debug_assert!(label < output.len());
    match kind {
        LossKind::SoftmaxCrossEntropy => {
            let max = output.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = output.iter().map(|&o| libm::exp(o - max)).collect();
            let sum: f64 = exps.iter().sum();
            let loss = libm::log(sum) - (output[label] - max);
            let mut grad = Vector::from_vec(exps.into_iter().map(|e| e / sum).collect());
            grad[label] -= 1.0;
            (loss, grad)
        }
        LossKind::MeanSquaredError => {
            let k = output.len() as f64;
            let mut grad = output.clone();
            grad[label] -= 1.0;
            let loss = grad.norm_sq() / k;
            grad.scale(2.0 / k);
            (loss, grad)
        }
    }
}

/// Labeled samples with their global ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub inputs: Vec<Vector>,
    pub labels: Vec<usize>,
    pub sample_ids: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Vec<Vector>, labels: Vec<usize>, sample_ids: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::dims("Batch::new (labels)", inputs.len(), labels.len()));
        }
        if inputs.len() != sample_ids.len() {
            return Err(Error::dims("Batch::new (sample_ids)", inputs.len(), sample_ids.len()));
        }
        Ok(Batch {
            inputs,
            labels,
            sample_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// A new batch holding the given positions, in the given order.
    pub fn select(&self, positions: &[usize]) -> Batch {
        Batch {
            inputs: positions.iter().map(|&p| self.inputs[p].clone()).collect(),
            labels: positions.iter().map(|&p| self.labels[p]).collect(),
            sample_ids: positions.iter().map(|&p| self.sample_ids[p]).collect(),
        }
    }

    pub fn validate_labels(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= num_classes) {
            Some(l) => Err(Error::InvalidArgument(format!(
                "label {l} out of range for {num_classes} classes"
            ))),
            None => Ok(()),
        }
    }

    /// Positions sorted by ascending sample id (stable on duplicates).
    fn reduction_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&p| self.sample_ids[p]);
        order
    }
}

/// Fixed-point solver effort accumulated over many solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SolveStats {
    pub solves: usize,
    pub iterations: usize,
    /// Solves that hit `max_iters` without meeting the tolerance.
    pub failures: usize,
}

impl SolveStats {
    pub fn record(&mut self, r: &FixedPointResult) {
        self.solves += 1;
        self.iterations += r.iterations;
        self.failures += usize::from(!r.converged);
    }

    pub fn merge(&mut self, other: SolveStats) {
        self.solves += other.solves;
        self.iterations += other.iterations;
        self.failures += other.failures;
    }

    pub fn mean_iterations(&self) -> f64 {
        if self.solves == 0 {
            0.0
        } else {
            self.iterations as f64 / self.solves as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub output: Vector,
    pub fixed_point: FixedPointResult,
}

/// Solves for `z*` from `z0` and applies the head. Never fails on
/// non-convergence; inspect `fixed_point.converged`.
pub fn forward(theta: &DeqParams, w: &HeadParams, x: &Vector, solver: &SolverSettings, z0: &Vector) -> Result<Forward> {
    let fixed_point = solve(theta, x, z0, solver)?;
    let (output, _) = head_forward(w, &fixed_point.z_star)?;
    Ok(Forward { output, fixed_point })
}

/// Predicted class (lowest index on ties) and the equilibrium used to get it.
pub fn predict(
    theta: &DeqParams,
    w: &HeadParams,
    x: &Vector,
    solver: &SolverSettings,
    z0: &Vector,
) -> Result<(usize, Vector)> {
    let f = forward(theta, w, x, solver, z0)?;
    if !f.fixed_point.converged {
        return Err(Error::NotConverged {
            what: "forward fixed-point solve",
            iterations: f.fixed_point.iterations,
            residual: f.fixed_point.residual,
        });
    }
    let class = f.output.argmax().ok_or(Error::InvalidArgument("empty head output".into()))?;
    Ok((class, f.fixed_point.z_star))
}

fn warm_start(theta: &DeqParams, cache: Option<&WarmCache>, id: usize) -> Vector {
    cache
        .and_then(|c| c.get(&id))
        .filter(|z| z.len() == theta.state_dim())
        .cloned()
        .unwrap_or_else(|| Vector::zeros(theta.state_dim()))
}

#[derive(Debug, Clone)]
pub struct GradientOutput {
    pub theta: DeqGrads,
    pub head: HeadGrads,
    pub mean_loss: f64,
    pub stats: SolveStats,
}

/// Mean loss and mean gradients over a batch.
///
/// Each sample is solved from its cached equilibrium when one exists, and the
/// cache is refreshed with the new `z*`. Sums run in ascending sample-id order.
pub fn full_gradient(
    theta: &DeqParams,
    w: &HeadParams,
    batch: &Batch,
    loss_kind: LossKind,
    backward: BackwardMode,
    solver: &SolverSettings,
    mut cache: Option<&mut WarmCache>,
) -> Result<GradientOutput> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("full_gradient needs a non-empty batch".into()));
    }
    let mut g_theta = DeqGrads::zeros_like(theta);
    let mut g_head = HeadGrads::zeros_like(w);
    let mut total_loss = 0.0;
    let mut stats = SolveStats::default();
    for p in batch.reduction_order() {
        let x = &batch.inputs[p];
        let id = batch.sample_ids[p];
        let z0 = warm_start(theta, cache.as_deref(), id);
        let fp = solve(theta, x, &z0, solver)?;
        stats.record(&fp);
        let (out, tape) = head_forward(w, &fp.z_star)?;
        let (loss, dl_dout) = loss_and_grad(loss_kind, &out, batch.labels[p]);
        let (hg, dl_dz) = head_backward(w, &tape, &dl_dout);
        let tg = grad_theta(theta, &fp.z_star, x, &dl_dz, backward, solver)?;
        total_loss += loss;
        g_head.axpy(1.0, &hg);
        g_theta.axpy(1.0, &tg);
        if let Some(c) = cache.as_deref_mut() {
            c.insert(id, fp.z_star);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    g_theta.scale(inv);
    g_head.scale(inv);
    if !g_theta.is_finite() || !total_loss.is_finite() {
        return Err(Error::NonFinite("full_gradient"));
    }
    Ok(GradientOutput {
        theta: g_theta,
        head: g_head,
        mean_loss: total_loss * inv,
        stats,
    })
}

/// Mean loss over a batch, reading (never writing) the warm-start cache.
pub fn batch_loss(
    theta: &DeqParams,
    w: &HeadParams,
    batch: &Batch,
    loss_kind: LossKind,
    solver: &SolverSettings,
    cache: Option<&WarmCache>,
) -> Result<(f64, SolveStats)> {
    if batch.is_empty() {
        return Ok((0.0, SolveStats::default()));
    }
    let mut total = 0.0;
    let mut stats = SolveStats::default();
    for p in batch.reduction_order() {
        let z0 = warm_start(theta, cache, batch.sample_ids[p]);
        let f = forward(theta, w, &batch.inputs[p], solver, &z0)?;
        stats.record(&f.fixed_point);
        total += loss_and_grad(loss_kind, &f.output, batch.labels[p]).0;
    }
    Ok((total / batch.len() as f64, stats))
}

/// Number of correct predictions in a batch, with cold starts. Solves that do
/// not converge still predict from their last iterate and are counted in the
/// returned stats.
pub fn count_correct(
    theta: &DeqParams,
    w: &HeadParams,
    batch: &Batch,
    solver: &SolverSettings,
) -> Result<(usize, SolveStats)> {
    let mut correct = 0;
    let mut stats = SolveStats::default();
    let z0 = Vector::zeros(theta.state_dim());
    for (x, &label) in batch.inputs.iter().zip(&batch.labels) {
        let f = forward(theta, w, x, solver, &z0)?;
        stats.record(&f.fixed_point);
        if f.output.argmax() == Some(label) {
            correct += 1;
        }
    }
    Ok((correct, stats))
}
