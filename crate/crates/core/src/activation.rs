//! Component-wise non-expansive activations.
//!
//! Every kind here acts coordinate by coordinate and is 1-Lipschitz on scalars,
//! which together with `‖B‖∞ < 1` makes the equilibrium map a contraction.

use crate::tensor::Vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
    Softplus,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Tanh,
        Activation::Sigmoid,
        Activation::Relu,
        Activation::Softplus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Activation::ALL.into_iter().find(|a| a.name() == name)
    }

    #[inline]
    pub fn eval(self, u: f64) -> f64 {
        match self {
            Activation::Tanh => libm::tanh(u),
            Activation::Sigmoid => sigmoid(u),
            Activation::Relu => u.max(0.0),
            // max(u, 0) + log(1 + e^-|u|) never overflows
            Activation::Softplus => u.max(0.0) + libm::log1p(libm::exp(-u.abs())),
        }
    }

    /// Scalar derivative. Always in `[0, 1]`; the ReLU kink at 0 maps to 0.
    #[inline]
    pub fn derivative(self, u: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = libm::tanh(u);
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(u);
                s * (1.0 - s)
            }
            Activation::Relu => {
                if u > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(u),
        }
    }

    pub fn apply(self, u: &Vector) -> Vector {
        Vector::from_vec(u.iter().map(|&v| self.eval(v)).collect())
    }

    pub fn derivative_vec(self, u: &Vector) -> Vector {
        Vector::from_vec(u.iter().map(|&v| self.derivative(v)).collect())
    }
}

impl core::fmt::Display for Activation {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

#[inline]
pub(crate) fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + libm::exp(-u))
    } else {
        let e = libm::exp(u);
        e / (1.0 + e)
    }
}
