//! Euclidean projection of the recurrent matrix onto `{A : ‖A‖∞ ≤ κ}`.
//!
//! The induced ∞-norm is the largest absolute row sum, so the Frobenius-nearest
//! feasible matrix is found row by row: each row is projected onto the ℓ1 ball
//! of radius κ. A row's projection is a soft threshold `sign(v)·max(|v| − γ, 0)`
//! whose level γ is the root of the monotone function
//! `h(γ) = Σ max(|v_m| − γ, 0) − κ`, located here by bisection.

use alloc::format;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSettings {
    /// Ball radius; strictly inside `(0, 1)` for the layer to contract.
    pub kappa: f64,
    /// Stop once the bracket on γ is narrower than this.
    pub bisect_tol: f64,
    pub max_bisect_iters: usize,
}

impl Default for ProjectionSettings {
    fn default() -> Self {
        ProjectionSettings {
            kappa: 0.95,
            bisect_tol: 1e-12,
            max_bisect_iters: 200,
        }
    }
}

impl ProjectionSettings {
    pub fn with_kappa(kappa: f64) -> Self {
        ProjectionSettings {
            kappa,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "kappa must lie strictly inside (0, 1), got {}",
                self.kappa
            )));
        }
        if !(self.bisect_tol > 0.0) || self.max_bisect_iters == 0 {
            return Err(Error::InvalidArgument(
                "bisection needs a positive tolerance and at least one iteration".into(),
            ));
        }
        Ok(())
    }
}

fn soft_threshold(v: f64, gamma: f64) -> f64 {
    v.signum() * (v.abs() - gamma).max(0.0)
}

/// Projects `v` onto the ℓ1 ball of radius `kappa`.
///
/// Rows already inside the ball are returned unchanged. Otherwise γ is
/// bracketed by `[0, max|v_m|]`, where `h(0) = ‖v‖₁ − κ > 0` and
/// `h(max|v_m|) = −κ < 0`. The upper end of the final bracket is used so the
/// result is always feasible.
pub fn project_l1_row(v: &Vector, kappa: f64, settings: &ProjectionSettings) -> Result<Vector> {
    if !(kappa > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "l1 radius must be positive, got {kappa}"
        )));
    }
    if !v.is_finite() {
        return Err(Error::NonFinite("project_l1_row"));
    }
    let l1: f64 = v.iter().map(|x| x.abs()).sum();
    if l1 <= kappa {
        return Ok(v.clone());
    }
    let excess = |gamma: f64| -> f64 {
        v.iter().map(|x| (x.abs() - gamma).max(0.0)).sum::<f64>() - kappa
    };

    let mut lo = 0.0;
    let mut hi = v.norm_inf();
    let mut iters = 0;
    while hi - lo > settings.bisect_tol {
        if iters == settings.max_bisect_iters {
            return Err(Error::NotConverged {
                what: "l1 projection bisection",
                iterations: iters,
                residual: hi - lo,
            });
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            // bracket is down to adjacent floats
            break;
        }
        if excess(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        iters += 1;
    }
    Ok(Vector::from_vec(
        v.iter().map(|&x| soft_threshold(x, hi)).collect(),
    ))
}

/// Projects every row of a square `b` onto the ℓ1 ball of radius `settings.kappa`.
pub fn project_inf_matrix(b: &Matrix, settings: &ProjectionSettings) -> Result<Matrix> {
    if b.rows() != b.cols() {
        return Err(Error::ShapeMismatch {
            op: "project_inf_matrix",
            expected: (b.rows(), b.rows()),
            found: b.shape(),
        });
    }
    settings.validate()?;
    let mut out = b.clone();
    for i in 0..b.rows() {
        let row = Vector::from_vec(b.row(i).to_vec());
        let projected = project_l1_row(&row, settings.kappa, settings)?;
        out.row_mut(i).copy_from_slice(projected.as_slice());
    }
    Ok(out)
}
