use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::activation::{arccos_kernel, Activation};
use super::spec::NetSpec;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

pub const DEFAULT_MC_SAMPLES: usize = 200_000;
pub const MIN_MC_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BnMethod {
    ClosedForm,
    MonteCarlo { samples: usize, seed: u64 },
}

/// Activation moments of batch-normalized hidden layers. Entry `i` belongs
/// to hidden layer `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnOrderParams {
    pub t: usize,
    pub qhat_t: Vec<f64>,
    pub qhat_st: Vec<f64>,
    pub methods: Vec<BnMethod>,
}

impl BnOrderParams {
    pub fn last_hidden(&self) -> (f64, f64) {
        let i = self.qhat_t.len() - 1;
        (self.qhat_t[i], self.qhat_st[i])
    }
}

/// Order parameters for a network whose hidden layers are batch-normalized
/// over `t` samples. ReLU layers use the closed form; other activations are
/// estimated by Monte Carlo over the `t`-dimensional pre-activation Gaussian.
pub fn bn_middle_order_params(
    spec: &NetSpec,
    t: usize,
    mc_samples: usize,
    seed: u64,
) -> Result<BnOrderParams> {
    spec.validate()?;
    if t <= 2 {
        return Err(Error::DegenerateRegime(format!(
            "batch of {t} samples: standardized pre-activations are fixed up to sign"
        )));
    }
    let hidden = spec.depth - 1;
    let mut out = BnOrderParams {
        t,
        qhat_t: Vec::with_capacity(hidden),
        qhat_st: Vec::with_capacity(hidden),
        methods: Vec::with_capacity(hidden),
    };
    // previous layer activity; inputs are standard normal
    let (mut prev_t, mut prev_st) = (1.0, 0.0);
    for l in 1..=hidden {
        let act = spec.activations[l - 1];
        let (a, b, method) = if act == Activation::Relu {
            let c = -1.0 / (t as f64 - 1.0);
            (0.5, 0.5 * arccos_kernel(c)?, BnMethod::ClosedForm)
        } else {
            if mc_samples < MIN_MC_SAMPLES {
                return Err(Error::InvalidArgument(format!(
                    "need at least {MIN_MC_SAMPLES} Monte Carlo samples, got {mc_samples}"
                )));
            }
            let var = spec.sigma_w2 * prev_t + spec.sigma_b2;
            let cov = spec.sigma_w2 * prev_st + spec.sigma_b2;
            let (a, b) = monte_carlo_layer(act, t, var, cov, mc_samples, seed, l as u64)?;
            (
                a,
                b,
                BnMethod::MonteCarlo {
                    samples: mc_samples,
                    seed,
                },
            )
        };
        out.qhat_t.push(a);
        out.qhat_st.push(b);
        out.methods.push(method);
        prev_t = a;
        prev_st = b;
    }
    Ok(out)
}

// Pre-activations are exchangeable with covariance (var - cov) I + cov 11^T.
// Sampled as sqrt(var - cov) (xi - mean xi) + sqrt(var + (t-1) cov) mean(xi) 1.
fn monte_carlo_layer(
    act: Activation,
    t: usize,
    var: f64,
    cov: f64,
    samples: usize,
    seed: u64,
    layer: u64,
) -> Result<(f64, f64)> {
    let spread = var - cov;
    let common = var + (t as f64 - 1.0) * cov;
    if spread <= 0.0 || common < 0.0 {
        return Err(Error::Domain(format!(
            "pre-activation covariance is not positive definite (var {var}, cov {cov})"
        )));
    }
    let (s_spread, s_common) = (spread.sqrt(), common.sqrt());
    let mut rng = rng::stream(seed, Purpose::MonteCarlo, layer);
    let mut z = vec![0.0; t];
    let (mut acc_t, mut acc_st) = (0.0, 0.0);
    let tf = t as f64;
    for _ in 0..samples {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let m = z.iter().sum::<f64>() / tf;
        for v in z.iter_mut() {
            *v = s_spread * (*v - m) + s_common * m;
        }
        let mean = z.iter().sum::<f64>() / tf;
        let var_b = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / tf;
        if var_b <= 0.0 {
            continue;
        }
        let sd = var_b.sqrt();
        let (mut sum, mut sq) = (0.0, 0.0);
        for v in &z {
            let h = act.eval((v - mean) / sd);
            sum += h;
            sq += h * h;
        }
        acc_t += sq / tf;
        acc_st += (sum * sum - sq) / (tf * (tf - 1.0));
    }
    let n = samples as f64;
    Ok((acc_t / n, acc_st / n))
}
