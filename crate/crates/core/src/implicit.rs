//! Gradients through the equilibrium.
//!
//! With `J = ∂g/∂z* = diag(φ′(pre)) B`, the loss gradient with respect to θ is
//! `uᵀ ∂g/∂θ` where `u` solves the adjoint system `u = Jᵀu + ∂L/∂z*`. The
//! Jacobian-free variant skips the solve and uses `u = ∂L/∂z*` directly.

use alloc::format;

use crate::deq::{AdjointMethod, DeqParams, SolverSettings};
use crate::error::{Error, Result};
use crate::tensor::{matvec, matvec_t, Matrix, Vector};

/// A tensor triple shaped like θ = (B, C, b).
///
/// Used for gradients, for the ADMM dual variables and for parameter
/// differences `θ_i − θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeqGrads {
    pub recurrent: Matrix,
    pub input: Matrix,
    pub bias: Vector,
}

impl DeqGrads {
    pub fn zeros_like(params: &DeqParams) -> Self {
        DeqGrads {
            recurrent: Matrix::zeros(params.recurrent.rows(), params.recurrent.cols()),
            input: Matrix::zeros(params.input.rows(), params.input.cols()),
            bias: Vector::zeros(params.bias.len()),
        }
    }

    /// `a − b`, blockwise.
    pub fn difference(a: &DeqParams, b: &DeqParams) -> Self {
        debug_assert!(a.same_shape(b));
        let mut recurrent = a.recurrent.clone();
        recurrent.axpy(-1.0, &b.recurrent);
        let mut input = a.input.clone();
        input.axpy(-1.0, &b.input);
        let mut bias = a.bias.clone();
        bias.axpy(-1.0, &b.bias);
        DeqGrads {
            recurrent,
            input,
            bias,
        }
    }

    pub fn same_shape(&self, params: &DeqParams) -> bool {
        self.recurrent.shape() == params.recurrent.shape()
            && self.input.shape() == params.input.shape()
            && self.bias.len() == params.bias.len()
    }

    fn blocks(&self) -> [&[f64]; 3] {
        [
            self.recurrent.as_slice(),
            self.input.as_slice(),
            self.bias.as_slice(),
        ]
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.blocks().into_iter().flat_map(|b| b.iter().copied())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &DeqGrads) {
        self.recurrent.axpy(alpha, &other.recurrent);
        self.input.axpy(alpha, &other.input);
        self.bias.axpy(alpha, &other.bias);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.recurrent.scale(alpha);
        self.input.scale(alpha);
        self.bias.scale(alpha);
    }

    /// Inner product over the flattened blocks.
    pub fn dot(&self, other: &DeqGrads) -> f64 {
        self.iter().zip(other.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, v| f64::max(m, v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }
}

impl DeqParams {
    /// `θ += alpha * delta`, blockwise.
    pub fn axpy(&mut self, alpha: f64, delta: &DeqGrads) {
        self.recurrent.axpy(alpha, &delta.recurrent);
        self.input.axpy(alpha, &delta.input);
        self.bias.axpy(alpha, &delta.bias);
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        [
            self.recurrent.as_slice(),
            self.input.as_slice(),
            self.bias.as_slice(),
        ]
        .into_iter()
        .flat_map(|b| b.iter().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardMode {
    /// Implicit-function-theorem gradient with an adjoint solve.
    ExactIft,
    /// Jacobian-free: the adjoint inverse replaced by the identity.
    Jfb,
}

impl BackwardMode {
    pub fn name(self) -> &'static str {
        match self {
            BackwardMode::ExactIft => "exact_ift",
            BackwardMode::Jfb => "jfb",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "exact_ift" => Some(BackwardMode::ExactIft),
            "jfb" => Some(BackwardMode::Jfb),
            _ => None,
        }
    }
}

/// Linearization of `g` at a fixed point: `D = diag(φ′(B z* + C x + b))`.
struct Linearization<'a> {
    params: &'a DeqParams,
    slope: Vector,
}

impl<'a> Linearization<'a> {
    fn at(params: &'a DeqParams, z_star: &Vector, x: &Vector) -> Result<Self> {
        let pre = params.preactivation(z_star, x)?;
        Ok(Linearization {
            params,
            slope: params.activation.derivative_vec(&pre),
        })
    }

    /// `Jᵀ u = Bᵀ (D u)`
    fn vjp(&self, u: &Vector) -> Vector {
        matvec_t(&self.params.recurrent, &u.hadamard(&self.slope)).expect("shapes checked")
    }

    /// `J v = D (B v)`
    fn jvp(&self, v: &Vector) -> Vector {
        matvec(&self.params.recurrent, v)
            .expect("shapes checked")
            .hadamard(&self.slope)
    }
}

/// `uᵀ ∂g/∂z*`, returned as a column vector.
pub fn vjp_g_z(params: &DeqParams, z_star: &Vector, x: &Vector, u: &Vector) -> Result<Vector> {
    if u.len() != params.state_dim() {
        return Err(Error::dims("vjp_g_z (u)", params.state_dim(), u.len()));
    }
    Ok(Linearization::at(params, z_star, x)?.vjp(u))
}

/// Solves `u = Jᵀu + y` to `‖u − (Jᵀu + y)‖∞ ≤ settings.tol`.
pub fn solve_adjoint(
    params: &DeqParams,
    z_star: &Vector,
    x: &Vector,
    y: &Vector,
    settings: &SolverSettings,
) -> Result<Vector> {
    if y.len() != params.state_dim() {
        return Err(Error::dims("solve_adjoint (y)", params.state_dim(), y.len()));
    }
    if !y.is_finite() {
        return Err(Error::NonFinite("solve_adjoint (rhs)"));
    }
    let lin = Linearization::at(params, z_star, x)?;
    match settings.adjoint {
        AdjointMethod::FixedPoint => adjoint_fixed_point(&lin, y, settings),
        AdjointMethod::NormalCg => adjoint_normal_cg(&lin, y, settings),
    }
}

fn adjoint_residual(lin: &Linearization<'_>, u: &Vector, y: &Vector) -> (Vector, f64) {
    let mut next = lin.vjp(u);
    next.axpy(1.0, y);
    let r = next.dist_inf(u);
    (next, r)
}

fn adjoint_fixed_point(lin: &Linearization<'_>, y: &Vector, settings: &SolverSettings) -> Result<Vector> {
    let mut u = y.clone();
    for _ in 0..=settings.max_iters {
        let (next, residual) = adjoint_residual(lin, &u, y);
        if !residual.is_finite() {
            return Err(Error::NonFinite("solve_adjoint"));
        }
        if residual <= settings.tol {
            return Ok(u);
        }
        u = next;
    }
    let (_, residual) = adjoint_residual(lin, &u, y);
    Err(Error::NotConverged {
        what: "adjoint fixed-point iteration",
        iterations: settings.max_iters,
        residual,
    })
}

/// CGNR: conjugate gradient on the normal equations `Mᵀ M u = Mᵀ y` of the
/// nonsymmetric system `M u = y`, `M = I − Jᵀ`.
fn adjoint_normal_cg(lin: &Linearization<'_>, y: &Vector, settings: &SolverSettings) -> Result<Vector> {
    // M v = v − Jᵀ v,  Mᵀ v = v − J v
    let apply_m = |v: &Vector| {
        let mut out = v.clone();
        out.axpy(-1.0, &lin.vjp(v));
        out
    };
    let apply_mt = |v: &Vector| {
        let mut out = v.clone();
        out.axpy(-1.0, &lin.jvp(v));
        out
    };

    let mut u = y.clone();
    let mut r = y.clone();
    r.axpy(-1.0, &apply_m(&u));
    let mut s = apply_mt(&r);
    let mut p = s.clone();
    let mut s_norm = s.norm_sq();
    let budget = settings.max_iters.max(4 * y.len());
    for _ in 0..budget {
        let (_, residual) = adjoint_residual(lin, &u, y);
        if !residual.is_finite() {
            return Err(Error::NonFinite("solve_adjoint"));
        }
        if residual <= settings.tol || s_norm == 0.0 {
            return Ok(u);
        }
        let q = apply_m(&p);
        let q_norm = q.norm_sq();
        if q_norm == 0.0 {
            break;
        }
        let alpha = s_norm / q_norm;
        u.axpy(alpha, &p);
        r.axpy(-alpha, &q);
        s = apply_mt(&r);
        let next_norm = s.norm_sq();
        let beta = next_norm / s_norm;
        s_norm = next_norm;
        let mut next_p = s.clone();
        next_p.axpy(beta, &p);
        p = next_p;
    }
    let (_, residual) = adjoint_residual(lin, &u, y);
    if residual <= settings.tol {
        return Ok(u);
    }
    Err(Error::NotConverged {
        what: "adjoint conjugate gradient",
        iterations: budget,
        residual,
    })
}

/// `∂L/∂θ` given `∂L/∂z*` at a converged fixed point.
///
/// With `s = u ⊙ φ′(pre)`: `∂L/∂B = s z*ᵀ`, `∂L/∂C = s xᵀ`, `∂L/∂b = s`.
pub fn grad_theta(
    params: &DeqParams,
    z_star: &Vector,
    x: &Vector,
    dl_dz: &Vector,
    mode: BackwardMode,
    settings: &SolverSettings,
) -> Result<DeqGrads> {
    if dl_dz.len() != params.state_dim() {
        return Err(Error::dims("grad_theta (dL/dz)", params.state_dim(), dl_dz.len()));
    }
    let lin = Linearization::at(params, z_star, x)?;
    let u = match mode {
        BackwardMode::ExactIft => match settings.adjoint {
            AdjointMethod::FixedPoint => adjoint_fixed_point(&lin, dl_dz, settings)?,
            AdjointMethod::NormalCg => adjoint_normal_cg(&lin, dl_dz, settings)?,
        },
        BackwardMode::Jfb => dl_dz.clone(),
    };
    let s = u.hadamard(&lin.slope);
    Ok(DeqGrads {
        recurrent: Matrix::outer(&s, z_star),
        input: Matrix::outer(&s, x),
        bias: s,
    })
}

/// Central finite differences of `loss` over every entry of θ.
///
/// The closure is expected to re-solve the fixed point for each perturbed
/// parameter set; nothing here is shared with the analytic gradient path.
pub fn finite_diff_grad<F>(mut loss: F, params: &DeqParams, eps: f64) -> Result<DeqGrads>
where
    F: FnMut(&DeqParams) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut grads = DeqGrads::zeros_like(params);
    let mut probe = params.clone();

    fn sweep<F: FnMut(&DeqParams) -> f64>(
        loss: &mut F,
        probe: &mut DeqParams,
        eps: f64,
        len: usize,
        slot: fn(&mut DeqParams) -> &mut [f64],
        out: &mut [f64],
    ) {
        for k in 0..len {
            let orig = slot(probe)[k];
            slot(probe)[k] = orig + eps;
            let up = loss(probe);
            slot(probe)[k] = orig - eps;
            let down = loss(probe);
            slot(probe)[k] = orig;
            out[k] = (up - down) / (2.0 * eps);
        }
    }

    let n_b = params.recurrent.as_slice().len();
    let n_c = params.input.as_slice().len();
    let n_bias = params.bias.len();
    sweep(&mut loss, &mut probe, eps, n_b, |p| p.recurrent.as_mut_slice(), grads.recurrent.as_mut_slice());
    sweep(&mut loss, &mut probe, eps, n_c, |p| p.input.as_mut_slice(), grads.input.as_mut_slice());
    sweep(&mut loss, &mut probe, eps, n_bias, |p| p.bias.as_mut_slice(), grads.bias.as_mut_slice());
    Ok(grads)
}
