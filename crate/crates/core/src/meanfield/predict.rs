use serde::{Deserialize, Serialize};

use super::bn::BnOrderParams;
use super::order::{KappaPair, MeanField};
use super::spec::{NetSpec, NormMode};
use crate::error::{Error, Result};

/// Convergence rate of the backward order parameters assumed by every
/// prediction.
pub const RATE_Q: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "unnormalized")]
    Unnormalized,
    #[serde(rename = "bn_last_meansub_smallT")]
    BnLastMeansubSmallT,
    #[serde(rename = "bn_last_meansub_bigT")]
    BnLastMeansubBigT,
    #[serde(rename = "bn_last_full_bigT")]
    BnLastFullBigT,
    #[serde(rename = "bn_middle_bound")]
    BnMiddleBound,
    #[serde(rename = "layernorm")]
    Layernorm,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Unnormalized => "unnormalized",
            Regime::BnLastMeansubSmallT => "bn_last_meansub_smallT",
            Regime::BnLastMeansubBigT => "bn_last_meansub_bigT",
            Regime::BnLastFullBigT => "bn_last_full_bigT",
            Regime::BnMiddleBound => "bn_middle_bound",
            Regime::Layernorm => "layernorm",
        }
    }
}

/// How the batch size is treated relative to the width for mean subtraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchScaling {
    /// T held fixed while M grows.
    Small,
    /// T grows with M at fixed ratio M/T.
    Big,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryPrediction {
    pub regime: Regime,
    pub m_lambda: Option<f64>,
    pub lambda_max_point: Option<f64>,
    pub lambda_max_lower: Option<f64>,
    pub lambda_max_upper: Option<f64>,
    pub m: usize,
    pub t: usize,
    pub rho: f64,
    /// The bounds drop nonnegative constants of unspecified size, so they hold
    /// modulo those constants.
    pub constants_dropped: bool,
    pub kappa: Option<KappaPair>,
}

impl TheoryPrediction {
    fn new(regime: Regime, m: usize, t: usize) -> Self {
        TheoryPrediction {
            regime,
            m_lambda: None,
            lambda_max_point: None,
            lambda_max_lower: None,
            lambda_max_upper: None,
            m,
            t,
            rho: m as f64 / t as f64,
            constants_dropped: false,
            kappa: None,
        }
    }
}

/// Layer-norm readout statistics measured from the last-layer variances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerEta {
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
}

/// Width exponents `(1 - 2q, 1 - q)` bracketing the largest eigenvalue of the
/// normalized FIM for a backward convergence rate `q`.
pub fn rate_exponents(q: f64) -> Result<(f64, f64)> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidArgument(format!("rate q must lie in (0, 1], got {q}")));
    }
    Ok((1.0 - 2.0 * q, 1.0 - q))
}

fn check_sizes(m: usize, t: usize) -> Result<()> {
    if m == 0 || t == 0 {
        return Err(Error::InvalidArgument("M and T must be positive".into()));
    }
    Ok(())
}

fn require_mode(spec: &NetSpec, mode: NormMode) -> Result<()> {
    if spec.norm_mode != mode {
        return Err(Error::InvalidArgument(format!(
            "prediction needs norm mode {mode}, spec has {}",
            spec.norm_mode
        )));
    }
    Ok(())
}

impl MeanField {
    fn non_centered_kappas(&self, spec: &NetSpec) -> Result<KappaPair> {
        if !spec.is_non_centered(self.grid()) {
            return Err(Error::CenteredNetwork(
                "sigma_b2 = 0 and every activation has zero Gaussian mean".into(),
            ));
        }
        let p = self.order_params(spec)?;
        self.kappas(spec, &p)
    }

    pub fn predict_unnormalized(&self, spec: &NetSpec, m: usize, t: usize) -> Result<TheoryPrediction> {
        check_sizes(m, t)?;
        require_mode(spec, NormMode::None)?;
        let k = self.non_centered_kappas(spec)?;
        let (mf, tf) = (m as f64, t as f64);
        let alpha = spec.alpha_total();
        let mut p = TheoryPrediction::new(Regime::Unnormalized, m, t);
        p.m_lambda = Some(k.kappa1 * spec.outputs as f64 / mf);
        p.lambda_max_point = Some(alpha * ((tf - 1.0) / tf * k.kappa2 + k.kappa1 / tf) * mf);
        p.kappa = Some(k);
        Ok(p)
    }

    pub fn predict_bn_last_meansub(
        &self,
        spec: &NetSpec,
        m: usize,
        t: usize,
        scaling: BatchScaling,
    ) -> Result<TheoryPrediction> {
        check_sizes(m, t)?;
        require_mode(spec, NormMode::BnLastMeansub)?;
        if t < 2 {
            return Err(Error::InvalidArgument(
                "mean subtraction needs at least two samples".into(),
            ));
        }
        let k = self.non_centered_kappas(spec)?;
        let (mf, tf) = (m as f64, t as f64);
        let alpha = spec.alpha_total();
        let gap = k.kappa1 - k.kappa2;
        let c = spec.outputs as f64;
        let regime = match scaling {
            BatchScaling::Small => Regime::BnLastMeansubSmallT,
            BatchScaling::Big => Regime::BnLastMeansubBigT,
        };
        let mut p = TheoryPrediction::new(regime, m, t);
        p.m_lambda = Some((1.0 - 1.0 / tf) * gap * c / mf);
        match scaling {
            BatchScaling::Small => p.lambda_max_point = Some(alpha * gap * mf / tf),
            BatchScaling::Big => {
                p.lambda_max_lower = Some(p.rho * alpha * gap);
                p.lambda_max_upper = Some((c * alpha * alpha * p.rho * gap * gap * mf).sqrt());
                p.constants_dropped = true;
            }
        }
        p.kappa = Some(k);
        Ok(p)
    }

    pub fn predict_bn_last_full(
        &self,
        spec: &NetSpec,
        m: usize,
        t: usize,
        sigma_k: &[f64],
    ) -> Result<TheoryPrediction> {
        check_sizes(m, t)?;
        require_mode(spec, NormMode::BnLastFull)?;
        if sigma_k.len() != spec.outputs {
            return Err(Error::InvalidArgument(format!(
                "expected {} output scales, got {}",
                spec.outputs,
                sigma_k.len()
            )));
        }
        if let Some(s) = sigma_k.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("output scale must be positive, got {s}")));
        }
        let k = self.non_centered_kappas(spec)?;
        let q1: f64 = sigma_k.iter().map(|s| 1.0 / (s * s)).sum();
        let q2: f64 = sigma_k.iter().map(|s| 1.0 / s.powi(4)).sum();
        let mf = m as f64;
        let alpha = spec.alpha_total();
        let gap = k.kappa1 - k.kappa2;
        let mut p = TheoryPrediction::new(Regime::BnLastFullBigT, m, t);
        p.m_lambda = Some(q1 * gap / mf);
        p.lambda_max_lower = Some(p.rho * alpha * (q2 / q1) * gap);
        p.lambda_max_upper = Some((q2 * alpha * alpha * p.rho * gap * gap * mf).sqrt());
        p.constants_dropped = true;
        p.kappa = Some(k);
        Ok(p)
    }

    pub fn predict_bn_middle_lower_bound(
        &self,
        spec: &NetSpec,
        m: usize,
        t: usize,
        bn: &BnOrderParams,
    ) -> Result<TheoryPrediction> {
        check_sizes(m, t)?;
        require_mode(spec, NormMode::BnMiddle)?;
        if t < 3 {
            return Err(Error::DegenerateRegime(format!("batch of {t} samples")));
        }
        if bn.t != t || bn.qhat_t.len() != spec.depth - 1 {
            return Err(Error::InvalidArgument(
                "batch-norm order parameters were computed for a different batch or depth".into(),
            ));
        }
        if let Some(a) = spec.activations.iter().find(|a| !a.is_nonnegative()) {
            return Err(Error::Precondition(format!(
                "the lower bound needs nonnegative activations, {a:?} takes negative values"
            )));
        }
        let (qt, qst) = bn.last_hidden();
        let (mf, tf) = (m as f64, t as f64);
        let mut p = TheoryPrediction::new(Regime::BnMiddleBound, m, t);
        p.lambda_max_lower = Some(spec.ratio(spec.depth - 1) * ((tf - 1.0) / tf * qst + qt / tf) * mf);
        Ok(p)
    }

    pub fn predict_layernorm(
        &self,
        spec: &NetSpec,
        m: usize,
        t: usize,
        eta: LayerEta,
    ) -> Result<TheoryPrediction> {
        check_sizes(m, t)?;
        require_mode(spec, NormMode::Layernorm)?;
        let c = spec.outputs;
        if c <= 2 {
            return Err(Error::DegenerateRegime(format!(
                "layer norm with {c} outputs: the normalized readout has no gradient and the FIM is zero"
            )));
        }
        let params = self.layernorm_order_params(spec)?;
        let k = self.kappas(spec, &params)?;
        let (mf, tf, cm2) = (m as f64, t as f64, c as f64 - 2.0);
        let alpha = spec.alpha_total();
        let LayerEta { eta1, eta2, eta3 } = eta;
        let s = ((eta3 * eta3 - eta1 * eta1) * tf + cm2 * (eta1 * eta1 * tf - eta2)) / tf
            * k.kappa2
            * k.kappa2
            + cm2 * eta2 * k.kappa1 * k.kappa1 / tf;
        let s = s.max(0.0);
        let mean_scale = cm2 * eta1 * k.kappa1;
        let mut p = TheoryPrediction::new(Regime::Layernorm, m, t);
        p.m_lambda = Some(mean_scale / mf);
        p.lambda_max_lower = Some(if mean_scale > 0.0 { alpha * s * mf / mean_scale } else { 0.0 });
        p.lambda_max_upper = Some(alpha * s.sqrt() * mf);
        p.kappa = Some(k);
        Ok(p)
    }

    /// The layer-norm second-moment constant `s` on its own.
    pub fn layernorm_s(&self, kappa: &KappaPair, c: usize, t: usize, eta: LayerEta) -> f64 {
        let (tf, cm2) = (t as f64, c as f64 - 2.0);
        ((eta.eta3 * eta.eta3 - eta.eta1 * eta.eta1) * tf + cm2 * (eta.eta1 * eta.eta1 * tf - eta.eta2))
            / tf
            * kappa.kappa2
            * kappa.kappa2
            + cm2 * eta.eta2 * kappa.kappa1 * kappa.kappa1 / tf
    }
}
