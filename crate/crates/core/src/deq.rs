//! The equilibrium layer `g(z; x) = φ(B z + C x + b)` and its fixed-point solvers.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::tensor::{self, inf_norm, matvec, Matrix, Vector};

/// Shared implicit-layer parameters θ = (B, C, b).
#[derive(Debug, Clone, PartialEq)]
pub struct DeqParams {
    /// `B`, `d1 × d1`. Kept inside the ∞-norm ball of radius κ < 1.
    pub recurrent: Matrix,
    /// `C`, `d1 × d`.
    pub input: Matrix,
    /// `b`, length `d1`.
    pub bias: Vector,
    pub activation: Activation,
}

impl DeqParams {
    pub fn new(recurrent: Matrix, input: Matrix, bias: Vector, activation: Activation) -> Result<Self> {
        let d1 = recurrent.rows();
        if recurrent.cols() != d1 {
            return Err(Error::ShapeMismatch {
                op: "DeqParams::new",
                expected: (d1, d1),
                found: recurrent.shape(),
            });
        }
        if input.rows() != d1 {
            return Err(Error::dims("DeqParams::new (C rows)", d1, input.rows()));
        }
        if bias.len() != d1 {
            return Err(Error::dims("DeqParams::new (b)", d1, bias.len()));
        }
        Ok(DeqParams {
            recurrent,
            input,
            bias,
            activation,
        })
    }

    pub fn zeros(input_dim: usize, state_dim: usize, activation: Activation) -> Self {
        DeqParams {
            recurrent: Matrix::zeros(state_dim, state_dim),
            input: Matrix::zeros(state_dim, input_dim),
            bias: Vector::zeros(state_dim),
            activation,
        }
    }

    /// Random initialization with `‖B‖∞` equal to `recurrent_norm` and a
    /// Glorot-style uniform `C`. The bias starts at zero.
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        state_dim: usize,
        activation: Activation,
        recurrent_norm: f64,
        rng: &mut R,
    ) -> Self {
        let mut recurrent =
            Matrix::from_fn(state_dim, state_dim, |_, _| rng.random_range(-1.0..1.0));
        let norm = inf_norm(&recurrent);
        if norm > 0.0 {
            recurrent.scale(recurrent_norm / norm);
        }
        let limit = libm::sqrt(6.0 / (input_dim + state_dim) as f64);
        let input = Matrix::from_fn(state_dim, input_dim, |_, _| rng.random_range(-limit..limit));
        DeqParams {
            recurrent,
            input,
            bias: Vector::zeros(state_dim),
            activation,
        }
    }

    /// `d1`, the equilibrium state width.
    #[inline]
    pub fn state_dim(&self) -> usize {
        self.bias.len()
    }

    /// `d`, the input feature width.
    #[inline]
    pub fn input_dim(&self) -> usize {
        self.input.cols()
    }

    pub fn num_params(&self) -> usize {
        self.recurrent.as_slice().len() + self.input.as_slice().len() + self.bias.len()
    }

    pub fn same_shape(&self, other: &DeqParams) -> bool {
        self.recurrent.shape() == other.recurrent.shape()
            && self.input.shape() == other.input.shape()
    }

    /// `B z + C x + b`
    pub fn preactivation(&self, z: &Vector, x: &Vector) -> Result<Vector> {
        if z.len() != self.state_dim() {
            return Err(Error::dims("apply_g (z)", self.state_dim(), z.len()));
        }
        if x.len() != self.input_dim() {
            return Err(Error::dims("apply_g (x)", self.input_dim(), x.len()));
        }
        let mut pre = matvec(&self.recurrent, z)?;
        pre.axpy(1.0, &matvec(&self.input, x)?);
        pre.axpy(1.0, &self.bias);
        Ok(pre)
    }

    /// The input injection `C x + b`, which is constant across solver iterations.
    pub(crate) fn injection(&self, x: &Vector) -> Result<Vector> {
        if x.len() != self.input_dim() {
            return Err(Error::dims("apply_g (x)", self.input_dim(), x.len()));
        }
        let mut inj = matvec(&self.input, x)?;
        inj.axpy(1.0, &self.bias);
        Ok(inj)
    }

    /// One map evaluation with a precomputed injection.
    #[inline]
    pub(crate) fn step(&self, z: &Vector, injection: &Vector) -> Vector {
        let d1 = self.state_dim();
        let mut out = Vector::zeros(d1);
        for i in 0..d1 {
            let pre = tensor::dot(self.recurrent.row(i), z.as_slice()) + injection[i];
            out[i] = self.activation.eval(pre);
        }
        out
    }
}

/// `g(z; x) = φ(B z + C x + b)`
pub fn apply_g(params: &DeqParams, z: &Vector, x: &Vector) -> Result<Vector> {
    Ok(params.activation.apply(&params.preactivation(z, x)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverMethod {
    Plain,
    Anderson,
}

impl SolverMethod {
    pub fn name(self) -> &'static str {
        match self {
            SolverMethod::Plain => "plain",
            SolverMethod::Anderson => "anderson",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "plain" => Some(SolverMethod::Plain),
            "anderson" => Some(SolverMethod::Anderson),
            _ => None,
        }
    }
}

/// How the adjoint linear system of the backward pass is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjointMethod {
    /// `u ← Jᵀu + y`, convergent whenever the forward map is a contraction.
    FixedPoint,
    /// Conjugate gradient on the normal equations of `(I − Jᵀ) u = y`.
    NormalCg,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    pub method: SolverMethod,
    pub max_iters: usize,
    /// Exit threshold on `‖z − g(z; x)‖∞`.
    pub tol: f64,
    /// Anderson window: the number of past residuals combined per step.
    pub history_m: usize,
    /// Anderson mixing weight in `(0, 1]`; 1 is undamped.
    pub damping: f64,
    /// Relative Tikhonov weight for the Anderson least-squares problem.
    pub ls_regularization: f64,
    pub adjoint: AdjointMethod,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings::training()
    }
}

impl SolverSettings {
    pub fn training() -> Self {
        SolverSettings {
            method: SolverMethod::Anderson,
            max_iters: 200,
            tol: 1e-6,
            history_m: 5,
            damping: 1.0,
            ls_regularization: 1e-10,
            adjoint: AdjointMethod::FixedPoint,
        }
    }

    /// Tight forward tolerance used when gradients are compared against finite differences.
    pub fn gradient_check() -> Self {
        SolverSettings {
            tol: 1e-10,
            max_iters: 2000,
            ..SolverSettings::training()
        }
    }

    pub fn plain(tol: f64, max_iters: usize) -> Self {
        SolverSettings {
            method: SolverMethod::Plain,
            tol,
            max_iters,
            ..SolverSettings::training()
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "solver tol must be positive, got {}",
                self.tol
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("solver max_iters must be at least 1".into()));
        }
        if self.method == SolverMethod::Anderson && self.history_m == 0 {
            return Err(Error::InvalidArgument(
                "anderson history_m must be at least 1".into(),
            ));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "anderson damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        if !(self.ls_regularization >= 0.0) {
            return Err(Error::InvalidArgument(
                "ls_regularization must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointResult {
    pub z_star: Vector,
    /// Number of updates applied to the initial guess.
    pub iterations: usize,
    /// `‖z_star − g(z_star; x)‖∞`
    pub residual: f64,
    pub converged: bool,
}

/// Dispatches on `settings.method`.
pub fn solve(params: &DeqParams, x: &Vector, z0: &Vector, settings: &SolverSettings) -> Result<FixedPointResult> {
    match settings.method {
        SolverMethod::Plain => solve_plain(params, x, z0, settings),
        SolverMethod::Anderson => solve_anderson(params, x, z0, settings),
    }
}

fn check_inputs(params: &DeqParams, x: &Vector, z0: &Vector, settings: &SolverSettings) -> Result<Vector> {
    settings.validate()?;
    if z0.len() != params.state_dim() {
        return Err(Error::dims("fixed-point solve (z0)", params.state_dim(), z0.len()));
    }
    let inj = params.injection(x)?;
    if !inj.is_finite() || !z0.is_finite() {
        return Err(Error::NonFinite("fixed-point solve (inputs)"));
    }
    Ok(inj)
}

/// Picard iteration `z ← g(z; x)`.
pub fn solve_plain(params: &DeqParams, x: &Vector, z0: &Vector, settings: &SolverSettings) -> Result<FixedPointResult> {
    let inj = check_inputs(params, x, z0, settings)?;
    let mut z = z0.clone();
    let mut k = 0;
    loop {
        let gz = params.step(&z, &inj);
        let residual = gz.dist_inf(&z);
        if !residual.is_finite() {
            return Err(Error::NonFinite("solve_plain"));
        }
        if residual <= settings.tol || k == settings.max_iters {
            return Ok(FixedPointResult {
                z_star: z,
                iterations: k,
                residual,
                converged: residual <= settings.tol,
            });
        }
        z = gz;
        k += 1;
    }
}

struct History {
    x: Vector,
    g: Vector,
    f: Vector,
}

/// Anderson acceleration (type II) over a window of `history_m` residuals.
///
/// The combination weights satisfy `Σγ = 1`; the constraint is eliminated by
/// working with residual differences, which turns the problem into an
/// unconstrained least squares solved through its regularized normal
/// equations. A window of one reduces to damped Picard iteration.
pub fn solve_anderson(
    params: &DeqParams,
    x: &Vector,
    z0: &Vector,
    settings: &SolverSettings,
) -> Result<FixedPointResult> {
    let inj = check_inputs(params, x, z0, settings)?;
    let beta = settings.damping;
    let m = settings.history_m.max(1);
    let mut window: VecDeque<History> = VecDeque::with_capacity(m);
    let mut z = z0.clone();
    let mut k = 0;
    loop {
        let gz = params.step(&z, &inj);
        let mut f = gz.clone();
        f.axpy(-1.0, &z);
        let residual = f.norm_inf();
        if !residual.is_finite() {
            return Err(Error::NonFinite("solve_anderson"));
        }
        if residual <= settings.tol || k == settings.max_iters {
            return Ok(FixedPointResult {
                z_star: z,
                iterations: k,
                residual,
                converged: residual <= settings.tol,
            });
        }

        if window.len() == m {
            window.pop_front();
        }
        window.push_back(History {
            x: z.clone(),
            g: gz.clone(),
            f: f.clone(),
        });

        let next = anderson_step(&window, &z, &gz, &f, beta, settings.ls_regularization)
            .filter(Vector::is_finite)
            .unwrap_or_else(|| damped(&z, &gz, beta));
        z = next;
        k += 1;
    }
}

fn damped(z: &Vector, gz: &Vector, beta: f64) -> Vector {
    let mut out = gz.clone();
    if beta < 1.0 {
        out.scale(beta);
        out.axpy(1.0 - beta, z);
    }
    out
}

fn anderson_step(
    window: &VecDeque<History>,
    z: &Vector,
    gz: &Vector,
    f: &Vector,
    beta: f64,
    reg: f64,
) -> Option<Vector> {
    let cols = window.len().checked_sub(1)?;
    if cols == 0 {
        return Some(damped(z, gz, beta));
    }
    let diff = |pick: fn(&History) -> &Vector, j: usize| -> Vector {
        let mut d = pick(&window[j + 1]).clone();
        d.axpy(-1.0, pick(&window[j]));
        d
    };
    let df: Vec<Vector> = (0..cols).map(|j| diff(|h| &h.f, j)).collect();

    let mut gram = alloc::vec![0.0; cols * cols];
    let mut rhs = alloc::vec![0.0; cols];
    for i in 0..cols {
        for j in i..cols {
            let v = df[i].dot(&df[j]);
            gram[i * cols + j] = v;
            gram[j * cols + i] = v;
        }
        rhs[i] = df[i].dot(f);
    }
    let scale = (0..cols).map(|i| gram[i * cols + i]).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return None;
    }
    let lambda = reg * scale;
    for i in 0..cols {
        gram[i * cols + i] += lambda;
    }
    if !tensor::solve_dense(&mut gram, &mut rhs, cols) {
        return None;
    }

    // z⁺ = β (g − ΔG α) + (1 − β)(z − ΔX α)
    let mut g_mix = gz.clone();
    let mut x_mix = z.clone();
    for (j, &alpha) in rhs.iter().enumerate() {
        g_mix.axpy(-alpha, &diff(|h| &h.g, j));
        if beta < 1.0 {
            x_mix.axpy(-alpha, &diff(|h| &h.x, j));
        }
    }
    if beta < 1.0 {
        g_mix.scale(beta);
        g_mix.axpy(1.0 - beta, &x_mix);
    }
    Some(g_mix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::{project_inf_matrix, ProjectionSettings};
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(a: f64, c: f64, b: f64, act: Activation) -> DeqParams {
        DeqParams::new(
            Matrix::from_vec(1, 1, vec![a]).unwrap(),
            Matrix::from_vec(1, 1, vec![c]).unwrap(),
            Vector::from(vec![b]),
            act,
        )
        .unwrap()
    }

    fn v(xs: &[f64]) -> Vector {
        Vector::from(xs.to_vec())
    }

    fn random_contraction(seed: u64, d: usize, d1: usize, kappa: f64, act: Activation) -> (DeqParams, Vector) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = DeqParams::random(d, d1, act, 3.0, &mut rng);
        p.recurrent = project_inf_matrix(&p.recurrent, &ProjectionSettings::with_kappa(kappa)).unwrap();
        let x = Vector::from((0..d).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>());
        (p, x)
    }

    #[test]
    fn apply_g_examples() {
        // B = 0, C = I: the recursion collapses to φ(x)
        let p = DeqParams::new(
            Matrix::zeros(2, 2),
            Matrix::identity(2),
            Vector::zeros(2),
            Activation::Tanh,
        )
        .unwrap();
        let x = v(&[0.01, -0.02]);
        let out = apply_g(&p, &v(&[5.0, 5.0]), &x).unwrap();
        assert_eq!(out.as_slice(), &[libm::tanh(0.01), libm::tanh(-0.02)]);

        let s = scalar(0.5, 1.0, 0.0, Activation::Tanh);
        assert_eq!(apply_g(&s, &v(&[0.0]), &v(&[0.0])).unwrap()[0], 0.0);
        let out = apply_g(&s, &v(&[1.0]), &v(&[0.2])).unwrap()[0];
        assert!((out - 0.604_367_777_117_163_6).abs() < 1e-12);

        assert!(apply_g(&s, &v(&[1.0, 2.0]), &v(&[0.2])).is_err());
        assert!(apply_g(&s, &v(&[1.0]), &v(&[0.2, 0.1])).is_err());
    }

    #[test]
    fn params_reject_inconsistent_shapes() {
        assert!(DeqParams::new(Matrix::zeros(2, 3), Matrix::zeros(2, 2), Vector::zeros(2), Activation::Relu).is_err());
        assert!(DeqParams::new(Matrix::zeros(2, 2), Matrix::zeros(3, 2), Vector::zeros(2), Activation::Relu).is_err());
        assert!(DeqParams::new(Matrix::zeros(2, 2), Matrix::zeros(2, 2), Vector::zeros(3), Activation::Relu).is_err());
    }

    #[test]
    fn plain_examples() {
        let settings = SolverSettings::plain(1e-12, 500);
        // z = relu(0.5 z + 0.5) stays in the linear regime: z* = 0.5 / (1 − 0.5)
        let p = scalar(0.5, 0.0, 0.5, Activation::Relu);
        let r = solve_plain(&p, &v(&[0.0]), &v(&[0.0]), &settings).unwrap();
        assert!(r.converged);
        assert!((r.z_star[0] - 1.0).abs() < 1e-11);

        // already at the fixed point
        let r0 = solve_plain(&p, &v(&[0.0]), &v(&[1.0]), &settings).unwrap();
        assert!(r0.converged && r0.iterations <= 1);
        assert!((r0.z_star[0] - 1.0).abs() <= 1e-12);

        // B = 0 converges after exactly one update
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut q = DeqParams::random(3, 4, Activation::Tanh, 0.5, &mut rng);
        q.recurrent = Matrix::zeros(4, 4);
        let x = v(&[0.3, -1.0, 2.0]);
        let r = solve_plain(&q, &x, &Vector::zeros(4), &settings).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.z_star, q.activation.apply(&q.injection(&x).unwrap()));
    }

    #[test]
    fn non_convergence_is_reported_not_fatal() {
        // z = tanh(−3 z + 1) oscillates under Picard iteration
        let p = scalar(-3.0, 0.0, 1.0, Activation::Tanh);
        let r = solve_plain(&p, &v(&[0.0]), &v(&[0.0]), &SolverSettings::plain(1e-10, 50)).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 50);
        assert!(r.residual > 1e-10);
    }

    #[test]
    fn nan_inputs_are_numeric_errors() {
        let p = scalar(0.5, 1.0, 0.0, Activation::Tanh);
        let err = solve_plain(&p, &v(&[f64::NAN]), &v(&[0.0]), &SolverSettings::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let p = scalar(0.5, 1.0, 0.0, Activation::Tanh);
        let mut s = SolverSettings::default();
        s.history_m = 0;
        assert!(solve_anderson(&p, &v(&[0.0]), &v(&[0.0]), &s).is_err());
        let s = SolverSettings::default().with_tol(0.0);
        assert!(solve_plain(&p, &v(&[0.0]), &v(&[0.0]), &s).is_err());
    }

    #[test]
    fn anderson_examples() {
        let p = scalar(0.5, 0.0, 0.5, Activation::Relu);
        let s = SolverSettings::training().with_tol(1e-12);
        let r = solve_anderson(&p, &v(&[0.0]), &v(&[1.0]), &s).unwrap();
        assert!(r.converged && r.iterations == 0);

        let (q, x) = random_contraction(3, 5, 8, 0.9, Activation::Tanh);
        let tol = 1e-9;
        let plain = solve_plain(&q, &x, &Vector::zeros(8), &SolverSettings::plain(tol, 5000)).unwrap();
        let mut window_one = SolverSettings::training().with_tol(tol);
        window_one.history_m = 1;
        window_one.max_iters = 5000;
        let aa1 = solve_anderson(&q, &x, &Vector::zeros(8), &window_one).unwrap();
        assert!(aa1.converged);
        assert!(aa1.z_star.dist_inf(&plain.z_star) <= 10.0 * tol);
        // an undamped window of one is exactly Picard iteration
        assert_eq!(aa1.iterations, plain.iterations);
    }

    #[test]
    fn anderson_agrees_with_plain_on_random_contractions() {
        let tol = 1e-8;
        for seed in 0..30 {
            for act in Activation::ALL {
                let (p, x) = random_contraction(seed, 5, 8, 0.9, act);
                let z0 = Vector::zeros(8);
                let plain = solve_plain(&p, &x, &z0, &SolverSettings::plain(tol, 5000)).unwrap();
                let aa = solve_anderson(&p, &x, &z0, &SolverSettings::training().with_tol(tol)).unwrap();
                assert!(plain.converged && aa.converged, "seed {seed} {act}");
                assert!(aa.z_star.dist_inf(&plain.z_star) <= 10.0 * tol);
                // certificate, checked independently of either solver
                let g = apply_g(&p, &aa.z_star, &x).unwrap();
                assert!(g.dist_inf(&aa.z_star) <= tol);
            }
        }
    }

    #[test]
    fn damped_anderson_still_converges() {
        let (p, x) = random_contraction(11, 4, 8, 0.95, Activation::Softplus);
        let mut s = SolverSettings::training().with_tol(1e-10);
        s.damping = 0.6;
        let r = solve_anderson(&p, &x, &Vector::zeros(8), &s).unwrap();
        assert!(r.converged);
    }

    #[test]
    fn contraction_holds_after_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kappa = 0.9;
        for trial in 0..100u64 {
            let act = Activation::ALL[(trial % 4) as usize];
            let (p, x) = random_contraction(trial + 100, 3, 6, kappa, act);
            let z1 = Vector::from((0..6).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<_>>());
            let z2 = Vector::from((0..6).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<_>>());
            let lhs = apply_g(&p, &z1, &x).unwrap().dist_inf(&apply_g(&p, &z2, &x).unwrap());
            assert!(lhs <= kappa * z1.dist_inf(&z2) + 1e-12);
        }
    }
}
