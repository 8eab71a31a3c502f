use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::ensemble::{grid_seed, meansub_scaling};
use crate::error::{Error, Result};
use crate::fimlab::{
    measure_normalization_stats, reversed_fim_of, spectrum, top_eigvec_alignment, AlignmentReport,
    NormalizationStats, SpectrumStats,
};
use crate::meanfield::{bn_middle_order_params, MeanField, NetSpec, NormMode, TheoryPrediction};
use crate::netlab::{forward, init_params, Batch};

/// A structured error in place of a result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub kind: String,
    pub message: String,
}

impl From<&Error> for ErrorRecord {
    fn from(e: &Error) -> Self {
        ErrorRecord {
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome<T> {
    Ok(T),
    Error(ErrorRecord),
}

impl<T> Outcome<T> {
    fn from_result(r: Result<T>) -> Self {
        match r {
            Ok(v) => Outcome::Ok(v),
            Err(e) => Outcome::Error(ErrorRecord::from(&e)),
        }
    }

    pub fn ok(&self) -> Option<&T> {
        match self {
            Outcome::Ok(v) => Some(v),
            Outcome::Error(_) => None,
        }
    }

    pub fn error(&self) -> Option<&ErrorRecord> {
        match self {
            Outcome::Ok(_) => None,
            Outcome::Error(e) => Some(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub mode: NormMode,
    pub m: usize,
    pub t: usize,
    pub prediction: Outcome<TheoryPrediction>,
    pub note: Option<String>,
}

/// Mean-field batch scale of each readout unit, `sqrt(q_t - q_st)` at the
/// last layer.
fn mean_field_sigma(mf: &MeanField, spec: &NetSpec) -> Result<Vec<f64>> {
    let p = mf.forward_order_params(&spec.clone().with_norm(NormMode::None))?;
    let l = spec.depth;
    let var = p.q_t[l] - p.q_st[l];
    if !(var > 0.0) {
        return Err(Error::DegenerateRegime("readout has no variance across the batch".into()));
    }
    Ok(vec![var.sqrt(); spec.outputs])
}

fn predict_mode(
    cfg: &ExperimentConfig,
    mf: &MeanField,
    mode: NormMode,
    m: usize,
    t: usize,
) -> (Result<TheoryPrediction>, Option<String>) {
    let spec = cfg.net.clone().with_norm(mode);
    match mode {
        NormMode::None => (mf.predict_unnormalized(&spec, m, t), None),
        NormMode::BnLastMeansub => (
            mf.predict_bn_last_meansub(&spec, m, t, meansub_scaling(m, t)),
            None,
        ),
        NormMode::BnLastFull => {
            if t <= 2 {
                return (
                    Err(Error::DegenerateRegime(format!("batch of {t} samples under full batch norm"))),
                    None,
                );
            }
            let r = mean_field_sigma(mf, &spec).and_then(|s| mf.predict_bn_last_full(&spec, m, t, &s));
            (r, Some("sigma_k from the mean-field readout variance".into()))
        }
        NormMode::BnMiddle => {
            let r = bn_middle_order_params(&spec, t, cfg.mc_samples, cfg.master_seed)
                .and_then(|bn| mf.predict_bn_middle_lower_bound(&spec, m, t, &bn));
            (r, None)
        }
        NormMode::Layernorm => {
            if spec.outputs <= 2 {
                return (
                    Err(Error::DegenerateRegime(format!(
                        "layer norm with {} outputs: zero Jacobian, zero FIM",
                        spec.outputs
                    ))),
                    None,
                );
            }
            (
                Err(Error::Precondition(
                    "layer-norm bounds need measured readout statistics; use the spectrum command".into(),
                )),
                None,
            )
        }
    }
}

/// Every applicable prediction for each width, without building a network.
pub fn predict_only(cfg: &ExperimentConfig) -> Result<Vec<PredictionRecord>> {
    cfg.validate()?;
    let mf = MeanField::new();
    let mut out = Vec::new();
    for m in cfg.resolved_widths() {
        let t = cfg.resolved_batch().batch_for(m);
        for mode in cfg.resolved_modes() {
            let (r, note) = predict_mode(cfg, &mf, mode, m, t);
            out.push(PredictionRecord {
                mode,
                m,
                t,
                prediction: Outcome::from_result(r),
                note,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub m: usize,
    pub t: usize,
    pub mode: NormMode,
    pub seed: u64,
    pub spectrum: SpectrumStats,
    pub alignment: Outcome<AlignmentReport>,
    pub stats: Option<NormalizationStats>,
    pub theory: Outcome<TheoryPrediction>,
}

/// One network at the first configured width, under the spec's own mode.
pub fn spectrum_once(cfg: &ExperimentConfig) -> Result<SpectrumReport> {
    cfg.validate()?;
    let mf = MeanField::new();
    let m = cfg.resolved_widths()[0];
    let t = cfg.resolved_batch().batch_for(m);
    let mode = cfg.net.norm_mode;
    let seed = grid_seed(cfg.master_seed, m, 0);
    let params = init_params(&cfg.net, m, seed)?;
    let batch = Batch::for_params(&params, t, seed);
    let mut f = reversed_fim_of(&params, &batch, mode)?;
    f.width = Some(m);
    f.seed = Some(seed);
    let s = spectrum(&f, cfg.keep_spectrum)?;
    let alignment = Outcome::from_result(top_eigvec_alignment(&cfg.net, &f).map(|mut a| {
        a.width = Some(m);
        a
    }));
    let stats = match mode {
        NormMode::BnLastMeansub | NormMode::BnLastFull | NormMode::Layernorm => {
            Some(measure_normalization_stats(&forward(&params, &batch, mode)?, mode)?)
        }
        _ => None,
    };
    let theory = match (&stats, mode) {
        (Some(NormalizationStats::Batch { sigma_k }), NormMode::BnLastFull) => {
            mf.predict_bn_last_full(&cfg.net, m, t, sigma_k)
        }
        (Some(NormalizationStats::Layer { eta }), _) => mf.predict_layernorm(&cfg.net, m, t, *eta),
        _ => predict_mode(cfg, &mf, mode, m, t).0,
    };
    Ok(SpectrumReport {
        m,
        t,
        mode,
        seed,
        spectrum: s,
        alignment,
        stats,
        theory: Outcome::from_result(theory),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::config::{BatchRule, ExperimentKind};
    use crate::meanfield::{Activation, Regime};

    fn relu() -> NetSpec {
        NetSpec::uniform(3, 1, Activation::Relu, 2.0, 0.0)
    }

    #[test]
    fn predictions_for_relu_at_thousand() {
        let mut cfg = ExperimentConfig::new(ExperimentKind::PredictOnly, relu());
        cfg.widths = vec![1000];
        let recs = predict_only(&cfg).unwrap();
        assert_eq!(recs.len(), 5);
        let get = |mode| recs.iter().find(|r| r.mode == mode).unwrap();
        let p = get(NormMode::None).prediction.ok().unwrap();
        assert_eq!(p.regime, Regime::Unnormalized);
        assert!((p.lambda_max_point.unwrap() - 2.0 * (0.999 * 0.342_85 + 0.0015) * 1000.0).abs() < 0.5);
        let p = get(NormMode::BnLastMeansub).prediction.ok().unwrap();
        assert_eq!(p.regime, Regime::BnLastMeansubBigT);
        let p = get(NormMode::BnMiddle).prediction.ok().unwrap();
        assert_eq!(p.regime, Regime::BnMiddleBound);
        assert_eq!(get(NormMode::Layernorm).prediction.error().unwrap().kind, "degenerate_regime");
    }

    #[test]
    fn centered_network_is_an_error_record() {
        let spec = NetSpec::uniform(3, 1, Activation::Linear, 1.0, 0.0);
        let mut cfg = ExperimentConfig::new(ExperimentKind::PredictOnly, spec);
        cfg.widths = vec![100];
        cfg.modes = vec![NormMode::None];
        let recs = predict_only(&cfg).unwrap();
        assert_eq!(recs[0].prediction.error().unwrap().kind, "centered_network");
    }

    #[test]
    fn spectrum_report_for_plain_relu() {
        let mut cfg = ExperimentConfig::new(ExperimentKind::SpectrumOnce, relu());
        cfg.net.sigma_b2 = 0.1;
        cfg.widths = vec![32];
        cfg.batch = Some(BatchRule::Fixed { t: 16 });
        let r = spectrum_once(&cfg).unwrap();
        assert!(r.spectrum.lambda_max > 0.0);
        assert!(r.alignment.ok().unwrap().cosines[0] > 0.5);
        assert!(r.theory.ok().is_some());
    }
}
