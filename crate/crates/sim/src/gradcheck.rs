//! Finite-difference check of the composite gradient over `(θ, w)`.

use fedeq_core::model::{batch_loss, full_gradient};
use fedeq_core::{Activation, BackwardMode, Batch, DeqParams, HeadParams, LossKind, SolverSettings, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Result, SimError};

/// Per-entry relative tolerance.
pub const REL_TOL: f64 = 1e-5;
/// Absolute tolerance for entries whose reference value is tiny.
pub const ABS_FLOOR: f64 = 1e-8;

/// Largest input or state width the check accepts.
pub const MAX_DIM: usize = 16;

/// `|a − f| / max(|f|, ABS_FLOOR / REL_TOL)`, so an entry passes exactly when
/// `|a − f| ≤ max(REL_TOL·|f|, ABS_FLOOR)`.
pub fn entry_error(analytic: f64, reference: f64) -> f64 {
    (analytic - reference).abs() / reference.abs().max(ABS_FLOOR / REL_TOL)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckSpec {
    pub input_dim: usize,
    pub state_dim: usize,
    pub trials: usize,
    /// Central-difference step.
    pub eps: f64,
    pub mode: BackwardMode,
    pub seed: u64,
    pub batch_size: usize,
    pub num_classes: usize,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        GradcheckSpec {
            input_dim: 3,
            state_dim: 4,
            trials: 100,
            eps: 1e-6,
            mode: BackwardMode::ExactIft,
            seed: 0,
            batch_size: 2,
            num_classes: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialReport {
    pub seed: u64,
    pub activation: &'static str,
    pub max_error: f64,
    pub entries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub mode: &'static str,
    pub trials: Vec<TrialReport>,
    pub max_error: f64,
    pub worst_seed: u64,
    /// Always true for JFB, whose error is informational.
    pub passed: bool,
}

/// Random instance for one trial: parameters, head and a labeled batch.
pub fn instance(spec: &GradcheckSpec, seed: u64) -> (DeqParams, HeadParams, Batch) {
    const SMOOTH: [Activation; 3] = [Activation::Tanh, Activation::Sigmoid, Activation::Softplus];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let act = SMOOTH[(seed % 3) as usize];
    let norm = rng.random_range(0.3..0.9);
    let mut theta = DeqParams::random(spec.input_dim, spec.state_dim, act, norm, &mut rng);
    theta.bias.as_mut_slice().iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    let head = HeadParams::random(&[spec.state_dim, 5, spec.num_classes], Activation::Tanh, &mut rng);
    let inputs = (0..spec.batch_size)
        .map(|_| Vector::from_vec((0..spec.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    let labels = (0..spec.batch_size).map(|_| rng.random_range(0..spec.num_classes)).collect();
    let batch = Batch::new(inputs, labels, (0..spec.batch_size).collect()).expect("parallel lists");
    (theta, head, batch)
}

fn nudge(theta: &DeqParams, head: &HeadParams, k: usize, delta: f64) -> (DeqParams, HeadParams) {
    let (mut t, mut h) = (theta.clone(), head.clone());
    let entry = t
        .recurrent
        .as_mut_slice()
        .iter_mut()
        .chain(t.input.as_mut_slice())
        .chain(t.bias.as_mut_slice())
        .chain(h.params_mut())
        .nth(k)
        .expect("index within parameter count");
    *entry += delta;
    (t, h)
}

/// Worst entry error of one trial.
pub fn check_trial(spec: &GradcheckSpec, seed: u64) -> Result<TrialReport> {
    let (theta, head, batch) = instance(spec, seed);
    let loss = LossKind::SoftmaxCrossEntropy;
    let out = full_gradient(&theta, &head, &batch, loss, spec.mode, &SolverSettings::gradient_check(), None)?;
    let analytic: Vec<f64> = out.theta.iter().chain(out.head.iter()).collect();

    let tight = SolverSettings::plain(1e-14, 100_000);
    let eval = |t: &DeqParams, h: &HeadParams| -> Result<f64> { Ok(batch_loss(t, h, &batch, loss, &tight, None)?.0) };
    let mut max_error = 0.0f64;
    for (k, &a) in analytic.iter().enumerate() {
        let (tp, hp) = nudge(&theta, &head, k, spec.eps);
        let (tm, hm) = nudge(&theta, &head, k, -spec.eps);
        let fd = (eval(&tp, &hp)? - eval(&tm, &hm)?) / (2.0 * spec.eps);
        max_error = max_error.max(entry_error(a, fd));
    }
    Ok(TrialReport {
        seed,
        activation: theta.activation.name(),
        max_error,
        entries: analytic.len(),
    })
}

pub fn run_gradcheck(spec: &GradcheckSpec) -> Result<GradcheckReport> {
    if spec.trials == 0 {
        return Err(SimError::Config("trials must be at least 1".into()));
    }
    if spec.input_dim == 0 || spec.state_dim == 0 || spec.input_dim > MAX_DIM || spec.state_dim > MAX_DIM {
        return Err(SimError::Config(format!("dims must lie in 1..={MAX_DIM}")));
    }
    if !(spec.eps > 0.0) || spec.batch_size == 0 || spec.num_classes < 2 {
        return Err(SimError::Config("eps must be positive, with a non-empty batch and at least 2 classes".into()));
    }
    let trials = (0..spec.trials as u64)
        .map(|t| check_trial(spec, spec.seed.wrapping_add(t)))
        .collect::<Result<Vec<_>>>()?;
    let worst = trials
        .iter()
        .max_by(|a, b| a.max_error.total_cmp(&b.max_error))
        .expect("at least one trial");
    let (max_error, worst_seed) = (worst.max_error, worst.seed);
    Ok(GradcheckReport {
        mode: spec.mode.name(),
        passed: spec.mode == BackwardMode::Jfb || max_error <= REL_TOL,
        trials,
        max_error,
        worst_seed,
    })
}
