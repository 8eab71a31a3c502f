use serde::{Deserialize, Serialize};

use super::activation::{arccos_kernel, positive_orthant, Activation};
use super::spec::{NetSpec, NormMode};
use crate::error::{Error, Result};
use crate::gaussq::{self, QuadratureGrid};

/// Which recurrence family produced an [`OrderParams`] record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecurrenceFamily {
    Plain,
    Layernorm,
}

/// Layerwise order parameters, indexed by layer `l = 0..=L`.
///
/// `q_*` are pre-activation second moments, `qhat_*` activation moments
/// (forward), `qtilde_*` sensitivity moments (backward). The `_t` entries
/// are per-sample magnitudes and `_st` overlaps between distinct samples.
/// The backward vectors are empty until [`MeanField::backward_order_params`]
/// has run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderParams {
    pub family: RecurrenceFamily,
    pub q_t: Vec<f64>,
    pub q_st: Vec<f64>,
    pub qhat_t: Vec<f64>,
    pub qhat_st: Vec<f64>,
    pub qtilde_t: Vec<f64>,
    pub qtilde_st: Vec<f64>,
}

impl OrderParams {
    pub fn depth(&self) -> usize {
        self.q_t.len() - 1
    }

    pub fn has_backward(&self) -> bool {
        !self.qtilde_t.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaPair {
    pub kappa1: f64,
    pub kappa2: f64,
    /// Set when `kappa2` is numerically zero, i.e. the network is centered
    /// and the rank-C spike of the reversed FIM is absent.
    pub centered_warning: bool,
}

/// Evaluates the mean-field recurrences. Holds the quadrature grid and a
/// switch for the closed-form fast paths of piecewise-linear activations.
#[derive(Debug, Clone)]
pub struct MeanField {
    grid: QuadratureGrid,
    analytic: bool,
}

impl Default for MeanField {
    fn default() -> Self {
        Self::new()
    }
}

impl MeanField {
    pub fn new() -> Self {
        MeanField {
            grid: QuadratureGrid::default(),
            analytic: true,
        }
    }

    pub fn with_grid(grid: QuadratureGrid) -> Self {
        MeanField {
            grid,
            analytic: true,
        }
    }

    /// Disable the closed forms and integrate every activation numerically.
    pub fn numeric_only(mut self) -> Self {
        self.analytic = false;
        self
    }

    pub fn grid(&self) -> &QuadratureGrid {
        &self.grid
    }

    /// `E[phi(sqrt(q) u)^2]`.
    pub fn act_square(&self, act: Activation, q: f64) -> Result<f64> {
        if self.analytic {
            match act {
                Activation::Relu => return positive(q).map(|q| 0.5 * q),
                Activation::LeakyRelu { slope } => {
                    return positive(q).map(|q| 0.5 * (1.0 + slope * slope) * q)
                }
                Activation::Linear => return positive(q),
                _ => {}
            }
        }
        let f = |x: f64| {
            let v = act.eval(x);
            v * v
        };
        gaussq::expect1_piecewise(f, act.breakpoints(), q, &self.grid)
    }

    /// Two-point integral `I_phi[a, b]`.
    pub fn act_pair(&self, act: Activation, a: f64, b: f64) -> Result<f64> {
        if self.analytic {
            match act {
                Activation::Relu => return Ok(0.5 * a * arccos_kernel(correlation(a, b)?)?),
                Activation::LeakyRelu { slope } => {
                    let c = correlation(a, b)?;
                    let j = arccos_kernel(c)?;
                    let jm = arccos_kernel(-c)?;
                    return Ok(0.5 * a * ((1.0 + slope * slope) * j - 2.0 * slope * jm));
                }
                Activation::Linear => {
                    correlation(a, b)?;
                    return Ok(b);
                }
                _ => {}
            }
        }
        let f = |x: f64| act.eval(x);
        let br = act.breakpoints();
        gaussq::expect2_piecewise(f, br, f, br, a, b, &self.grid)
    }

    /// `E[phi'(sqrt(q) u)^2]`.
    pub fn deriv_square(&self, act: Activation, q: f64) -> Result<f64> {
        if self.analytic {
            match act {
                Activation::Relu => return positive(q).map(|_| 0.5),
                Activation::LeakyRelu { slope } => {
                    return positive(q).map(|_| 0.5 * (1.0 + slope * slope))
                }
                Activation::Linear => return positive(q).map(|_| 1.0),
                _ => {}
            }
        }
        let f = |x: f64| {
            let v = act.deriv(x);
            v * v
        };
        gaussq::expect1_piecewise(f, act.breakpoints(), q, &self.grid)
    }

    /// Two-point integral `I_phi'[a, b]`.
    pub fn deriv_pair(&self, act: Activation, a: f64, b: f64) -> Result<f64> {
        if self.analytic {
            match act {
                Activation::Relu => return Ok(positive_orthant(correlation(a, b)?)),
                Activation::LeakyRelu { slope } => {
                    let c = correlation(a, b)?;
                    let same = positive_orthant(c);
                    let mixed = 0.5 - same;
                    return Ok((1.0 + slope * slope) * same + 2.0 * slope * mixed);
                }
                Activation::Linear => {
                    correlation(a, b)?;
                    return Ok(1.0);
                }
                _ => {}
            }
        }
        let f = |x: f64| act.deriv(x);
        let br = act.breakpoints();
        gaussq::expect2_piecewise(f, br, f, br, a, b, &self.grid)
    }

    /// Forward recurrences for networks whose hidden layers are not
    /// normalized. Inputs are standardized, so the layer-0 activity is 1
    /// and distinct samples do not overlap.
    pub fn forward_order_params(&self, spec: &NetSpec) -> Result<OrderParams> {
        spec.validate()?;
        if !spec.norm_mode.has_plain_hidden_layers() {
            return Err(Error::InvalidArgument(format!(
                "plain recurrences do not apply to norm mode {}",
                spec.norm_mode
            )));
        }
        let depth = spec.depth;
        let mut p = OrderParams {
            family: RecurrenceFamily::Plain,
            q_t: vec![0.0; depth + 1],
            q_st: vec![0.0; depth + 1],
            qhat_t: vec![0.0; depth + 1],
            qhat_st: vec![0.0; depth + 1],
            qtilde_t: Vec::new(),
            qtilde_st: Vec::new(),
        };
        p.q_t[0] = 1.0;
        p.qhat_t[0] = 1.0;
        for l in 1..=depth {
            let qt = spec.sigma_w2 * p.qhat_t[l - 1] + spec.sigma_b2;
            let qst = spec.sigma_w2 * p.qhat_st[l - 1] + spec.sigma_b2;
            p.q_t[l] = qt;
            p.q_st[l] = qst;
            if l < depth {
                let act = spec.activations[l - 1];
                p.qhat_t[l] = self.act_square(act, qt)?;
                p.qhat_st[l] = self.act_pair(act, qt, qst)?;
            } else {
                // linear readout
                p.qhat_t[l] = qt;
                p.qhat_st[l] = qst;
            }
        }
        Ok(p)
    }

    /// Backward recurrences, started from unit sensitivity at the readout.
    pub fn backward_order_params(&self, spec: &NetSpec, forward: &OrderParams) -> Result<OrderParams> {
        let depth = spec.depth;
        if forward.depth() != depth {
            return Err(Error::InvalidArgument(
                "forward order parameters belong to a different depth".into(),
            ));
        }
        let mut p = forward.clone();
        p.qtilde_t = vec![0.0; depth + 1];
        p.qtilde_st = vec![0.0; depth + 1];
        p.qtilde_t[depth] = 1.0;
        p.qtilde_st[depth] = 1.0;
        for l in (1..depth).rev() {
            let act = spec.activations[l - 1];
            match forward.family {
                RecurrenceFamily::Plain => {
                    let (qt, qst) = (forward.q_t[l], forward.q_st[l]);
                    p.qtilde_t[l] = spec.sigma_w2 * p.qtilde_t[l + 1] * self.deriv_square(act, qt)?;
                    p.qtilde_st[l] =
                        spec.sigma_w2 * p.qtilde_st[l + 1] * self.deriv_pair(act, qt, qst)?;
                }
                RecurrenceFamily::Layernorm => {
                    // the normalizer divides by the raw pre-activation variance
                    let raw = spec.sigma_w2 * forward.qhat_t[l - 1] + spec.sigma_b2;
                    let c = forward.q_st[l];
                    let gain = spec.sigma_w2 / raw;
                    p.qtilde_t[l] = gain * p.qtilde_t[l + 1] * self.deriv_square(act, 1.0)?;
                    p.qtilde_st[l] = gain * p.qtilde_st[l + 1] * self.deriv_pair(act, 1.0, c)?;
                }
            }
        }
        Ok(p)
    }

    /// Forward and backward recurrences under layer normalization of every
    /// layer. Pre-activations have unit variance after normalization, so
    /// `q_t = 1` and `q_st` is the normalized overlap.
    pub fn layernorm_order_params(&self, spec: &NetSpec) -> Result<OrderParams> {
        spec.validate()?;
        if spec.norm_mode != NormMode::Layernorm {
            return Err(Error::InvalidArgument(format!(
                "layer-norm recurrences need norm mode layernorm, got {}",
                spec.norm_mode
            )));
        }
        let depth = spec.depth;
        let mut p = OrderParams {
            family: RecurrenceFamily::Layernorm,
            q_t: vec![0.0; depth + 1],
            q_st: vec![0.0; depth + 1],
            qhat_t: vec![0.0; depth + 1],
            qhat_st: vec![0.0; depth + 1],
            qtilde_t: Vec::new(),
            qtilde_st: Vec::new(),
        };
        p.q_t[0] = 1.0;
        p.qhat_t[0] = 1.0;
        for l in 1..=depth {
            let raw_t = spec.sigma_w2 * p.qhat_t[l - 1] + spec.sigma_b2;
            let raw_st = spec.sigma_w2 * p.qhat_st[l - 1] + spec.sigma_b2;
            let c = (raw_st / raw_t).clamp(-1.0, 1.0);
            p.q_t[l] = 1.0;
            p.q_st[l] = c;
            if l < depth {
                let act = spec.activations[l - 1];
                p.qhat_t[l] = self.act_square(act, 1.0)?;
                p.qhat_st[l] = self.act_pair(act, 1.0, c)?;
            } else {
                p.qhat_t[l] = 1.0;
                p.qhat_st[l] = c;
            }
        }
        self.backward_order_params(spec, &p)
    }

    /// Both recurrence families for `spec`, dispatching on the norm mode.
    pub fn order_params(&self, spec: &NetSpec) -> Result<OrderParams> {
        match spec.norm_mode {
            NormMode::Layernorm => self.layernorm_order_params(spec),
            NormMode::BnMiddle => Err(Error::InvalidArgument(
                "middle-layer batch norm has its own order parameters; see bn_middle_order_params"
                    .into(),
            )),
            _ => {
                let fwd = self.forward_order_params(spec)?;
                self.backward_order_params(spec, &fwd)
            }
        }
    }

    pub fn kappas(&self, spec: &NetSpec, params: &OrderParams) -> Result<KappaPair> {
        if !params.has_backward() {
            return Err(Error::Precondition(
                "kappas need the backward order parameters".into(),
            ));
        }
        let alpha = spec.alpha_total();
        let mut k1 = 0.0;
        let mut k2 = 0.0;
        for l in 1..=spec.depth {
            let w = spec.ratio(l - 1) / alpha;
            k1 += w * params.qtilde_t[l] * params.qhat_t[l - 1];
            k2 += w * params.qtilde_st[l] * params.qhat_st[l - 1];
        }
        Ok(KappaPair {
            kappa1: k1,
            kappa2: k2,
            centered_warning: k2.abs() < 1e-10,
        })
    }
}

fn positive(q: f64) -> Result<f64> {
    if q > 0.0 && q.is_finite() {
        Ok(q)
    } else {
        Err(Error::Domain(format!("variance must be positive, got {q}")))
    }
}

fn correlation(a: f64, b: f64) -> Result<f64> {
    positive(a)?;
    if !b.is_finite() || b.abs() > a * (1.0 + 1e-12) {
        return Err(Error::Domain(format!(
            "covariance {b} exceeds variance {a} in magnitude"
        )));
    }
    Ok((b / a).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn relu_spec() -> NetSpec {
        NetSpec::uniform(3, 1, Activation::Relu, 2.0, 0.0)
    }

    // Hand evaluation of the ReLU recurrences through the arccosine kernel.
    fn relu_oracle() -> (f64, f64, f64, f64) {
        let j = |x: f64| ((1.0 - x * x).sqrt() + (PI - x.acos()) * x) / PI;
        let qhat_st1 = 1.0 / PI;
        let c2 = 2.0 * qhat_st1 / 2.0;
        let qhat_st2 = j(c2);
        let qtilde_st2 = 2.0 * (PI - c2.acos()) / (2.0 * PI);
        let qtilde_st1 = 2.0 * qtilde_st2 * 0.25;
        (qhat_st1, qhat_st2, qtilde_st2, qtilde_st1)
    }

    #[test]
    fn relu_forward_examples() {
        let mf = MeanField::new();
        let p = mf.forward_order_params(&relu_spec()).unwrap();
        for l in 0..3 {
            assert_abs_diff_eq!(p.qhat_t[l], 1.0, epsilon = 1e-12);
        }
        let (h1, h2, _, _) = relu_oracle();
        assert_abs_diff_eq!(p.qhat_st[1], h1, epsilon = 1e-12);
        assert_abs_diff_eq!(p.qhat_st[2], h2, epsilon = 1e-12);
        assert_abs_diff_eq!(p.qhat_st[1], std::f64::consts::FRAC_1_PI, epsilon = 1e-5);
        assert_abs_diff_eq!(p.qhat_st[2], 0.49371, epsilon = 5e-5);
    }

    #[test]
    fn relu_backward_examples() {
        let mf = MeanField::new();
        let p = mf.order_params(&relu_spec()).unwrap();
        for l in 1..=3 {
            assert_abs_diff_eq!(p.qtilde_t[l], 1.0, epsilon = 1e-12);
        }
        assert_eq!(p.qtilde_st[3], 1.0);
        let (_, _, t2, t1) = relu_oracle();
        assert_abs_diff_eq!(p.qtilde_st[2], t2, epsilon = 1e-12);
        assert_abs_diff_eq!(p.qtilde_st[1], t1, epsilon = 1e-12);
        assert_abs_diff_eq!(p.qtilde_st[2], 0.60312, epsilon = 2e-5);
        assert_abs_diff_eq!(p.qtilde_st[1], 0.30156, epsilon = 1e-5);
    }

    #[test]
    fn relu_kappas() {
        let mf = MeanField::new();
        let spec = relu_spec();
        let p = mf.order_params(&spec).unwrap();
        let k = mf.kappas(&spec, &p).unwrap();
        assert_abs_diff_eq!(k.kappa1, 1.5, epsilon = 1e-12);
        let (h1, h2, t2, _) = relu_oracle();
        assert_abs_diff_eq!(k.kappa2, 0.5 * (t2 * h1 + h2), epsilon = 1e-12);
        assert_abs_diff_eq!(k.kappa2, 0.34285, epsilon = 5e-5);
        assert!(!k.centered_warning);
    }

    #[test]
    fn linear_network_is_centered() {
        let mf = MeanField::new();
        let spec = NetSpec::uniform(3, 1, Activation::Linear, 1.0, 0.0);
        let p = mf.order_params(&spec).unwrap();
        assert!(p.qhat_st.iter().all(|&v| v == 0.0));
        let k = mf.kappas(&spec, &p).unwrap();
        assert_eq!(k.kappa2, 0.0);
        assert!(k.centered_warning);
    }

    #[test]
    fn centered_tanh_has_zero_overlap() {
        let mf = MeanField::new();
        let spec = NetSpec::uniform(4, 1, Activation::Tanh, 1.5, 0.0);
        let p = mf.order_params(&spec).unwrap();
        let k = mf.kappas(&spec, &p).unwrap();
        assert!(k.kappa2.abs() < 1e-10);
        assert!(k.centered_warning);
    }

    #[test]
    fn numeric_path_matches_closed_forms() {
        let exact = MeanField::new();
        let numeric = MeanField::new().numeric_only();
        for act in [Activation::Relu, Activation::LeakyRelu { slope: 0.2 }, Activation::Linear] {
            for (sw, sb) in [(2.0, 0.0), (1.3, 0.4), (3.0, 0.64)] {
                let spec = NetSpec::uniform(5, 1, act, sw, sb);
                let a = exact.order_params(&spec).unwrap();
                let b = numeric.order_params(&spec).unwrap();
                for l in 0..=5 {
                    assert_abs_diff_eq!(a.qhat_t[l], b.qhat_t[l], epsilon = 1e-9);
                    assert_abs_diff_eq!(a.qhat_st[l], b.qhat_st[l], epsilon = 1e-6);
                    assert_abs_diff_eq!(a.qtilde_t[l], b.qtilde_t[l], epsilon = 1e-9);
                    assert_abs_diff_eq!(a.qtilde_st[l], b.qtilde_st[l], epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn overlap_never_exceeds_activity() {
        let mf = MeanField::new();
        for act in [
            Activation::Relu,
            Activation::Tanh,
            Activation::Sigmoid,
            Activation::Erf,
            Activation::LeakyRelu { slope: 0.05 },
        ] {
            let spec = NetSpec::uniform(5, 1, act, 2.5, 0.3);
            let p = mf.order_params(&spec).unwrap();
            for l in 0..=5 {
                assert!(p.qhat_st[l] <= p.qhat_t[l] + 1e-12);
                assert!(p.qhat_st[l] >= 0.0);
            }
        }
    }

    #[test]
    fn bitwise_repeatable() {
        let mf = MeanField::new();
        let spec = NetSpec::uniform(4, 1, Activation::Tanh, 3.0, 0.64);
        let a = mf.order_params(&spec).unwrap();
        let b = mf.order_params(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn layernorm_relu_activity_is_one_half() {
        let mf = MeanField::new();
        for sw in [0.5, 2.0, 7.0] {
            let spec = NetSpec::uniform(4, 3, Activation::Relu, sw, 0.0).with_norm(NormMode::Layernorm);
            let p = mf.layernorm_order_params(&spec).unwrap();
            for l in 1..4 {
                assert_abs_diff_eq!(p.qhat_t[l], 0.5, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn layernorm_tanh_activity() {
        // order-201 Hermite oracle for E[tanh(u)^2]
        let g = gaussq::build_grid(201).unwrap();
        let oracle = gaussq::expect1(|x| x.tanh().powi(2), 1.0, &g).unwrap();
        assert_abs_diff_eq!(oracle, 0.39429, epsilon = 1e-5);
        let mf = MeanField::new();
        let spec = NetSpec::uniform(4, 3, Activation::Tanh, 2.0, 0.0).with_norm(NormMode::Layernorm);
        let p = mf.layernorm_order_params(&spec).unwrap();
        for l in 1..4 {
            assert_abs_diff_eq!(p.qhat_t[l], oracle, epsilon = 1e-8);
            assert!(p.qhat_st[l].abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_family_is_rejected() {
        let mf = MeanField::new();
        let spec = relu_spec().with_norm(NormMode::Layernorm);
        assert!(mf.forward_order_params(&spec).is_err());
        let spec = relu_spec().with_norm(NormMode::BnMiddle);
        assert!(mf.order_params(&spec).is_err());
    }

    #[test]
    fn kappas_need_backward_pass() {
        let mf = MeanField::new();
        let spec = relu_spec();
        let fwd = mf.forward_order_params(&spec).unwrap();
        assert!(matches!(mf.kappas(&spec, &fwd), Err(Error::Precondition(_))));
    }
}
