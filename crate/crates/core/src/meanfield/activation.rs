use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussq::{self, QuadratureGrid};

/// Pointwise nonlinearity of a hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    Sigmoid,
    Erf,
    Linear,
}

const TWO_OVER_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

impl Activation {
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Erf => libm::erf(x),
            Activation::Linear => x,
        }
    }

    /// Weak derivative; the kink of the rectifiers takes the left value.
    #[inline]
    pub fn deriv(&self, x: f64) -> f64 {
        match *self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s)
            }
            Activation::Erf => TWO_OVER_SQRT_PI * (-x * x).exp(),
            Activation::Linear => 1.0,
        }
    }

    /// Points where `eval` or `deriv` is not smooth.
    pub fn breakpoints(&self) -> &'static [f64] {
        match self {
            Activation::Relu | Activation::LeakyRelu { .. } => &[0.0],
            _ => &[],
        }
    }

    pub fn is_nonnegative(&self) -> bool {
        matches!(self, Activation::Relu | Activation::Sigmoid)
    }

    pub fn validate(&self) -> Result<()> {
        if let Activation::LeakyRelu { slope } = *self {
            if !(slope > 0.0 && slope < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "leaky ReLU slope must lie in (0, 1), got {slope}"
                )));
            }
        }
        Ok(())
    }

    /// Largest |phi'| on a dense grid over [-50, 50].
    pub fn derivative_bound(&self) -> f64 {
        (0..=100_000)
            .map(|i| self.deriv(-50.0 + 1e-3 * i as f64).abs())
            .fold(0.0, f64::max)
    }

    /// `E[phi(u)]` for standard normal `u`.
    pub fn gaussian_mean(&self, grid: &QuadratureGrid) -> f64 {
        gaussq::expect1_piecewise(|x| self.eval(x), self.breakpoints(), 1.0, grid)
            .expect("unit variance is valid")
    }

    pub fn is_centered(&self, grid: &QuadratureGrid) -> bool {
        self.gaussian_mean(grid).abs() < 1e-8
    }
}

/// Arccosine kernel `J(x) = (sqrt(1 - x^2) + (pi - arccos x) x) / pi`.
pub fn arccos_kernel(x: f64) -> Result<f64> {
    if !(x.abs() <= 1.0) {
        return Err(Error::Domain(format!(
            "arccosine kernel needs |x| <= 1, got {x}"
        )));
    }
    let pi = std::f64::consts::PI;
    Ok(((1.0 - x * x).max(0.0).sqrt() + (pi - x.acos()) * x) / pi)
}

/// Probability that two unit Gaussians with correlation `c` are both positive.
pub(crate) fn positive_orthant(c: f64) -> f64 {
    let pi = std::f64::consts::PI;
    (pi - c.clamp(-1.0, 1.0).acos()) / (2.0 * pi)
}
