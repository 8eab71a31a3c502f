use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ExperimentKind};
use crate::error::{Error, Result};
use crate::fimlab::{
    measure_normalization_stats, reversed_fim_of, spectrum, NormalizationStats, SpectrumStats,
};
use crate::meanfield::{
    bn_middle_order_params, BatchScaling, BnOrderParams, MeanField, NetSpec, NormMode,
    TheoryPrediction,
};
use crate::netlab::{empirical_backward_order_params, forward, init_params, Batch};
use crate::rng::member_seed;

/// Seed of ensemble member `member` at base width `m`. Every mode run at the
/// same `(m, member)` sees the same network and inputs.
pub fn grid_seed(master: u64, m: usize, member: usize) -> u64 {
    member_seed(member_seed(master, m as u64), member as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Summary {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Summary {
            mean,
            std,
            min: xs.iter().cloned().fold(f64::INFINITY, f64::min),
            max: xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            count: n,
        }
    }
}

/// Least-squares line through `(ln x, ln y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub label: String,
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
}

pub fn log_log_fit(label: &str, xs: &[f64], ys: &[f64]) -> Result<SlopeFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument("slope fit needs two or more points".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Numerical("log-log fit of a non-positive value".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let stderr = if lx.len() > 2 {
        let rss: f64 = lx
            .iter()
            .zip(&ly)
            .map(|(x, y)| (y - intercept - slope * x).powi(2))
            .sum();
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(SlopeFit {
        label: label.to_string(),
        slope,
        intercept,
        stderr,
    })
}

/// One ensemble member at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub member: usize,
    pub seed: u64,
    pub spectrum: Option<SpectrumStats>,
    /// Scalar measurement for runs that do not take a spectrum.
    pub value: Option<f64>,
    pub stats: Option<NormalizationStats>,
    /// Theory that depends on statistics measured on this member.
    pub theory: Option<TheoryPrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub m: usize,
    pub t: usize,
    pub mode: NormMode,
    pub members: Vec<MemberRecord>,
    /// Summary of the headline quantity: `lambda_max`, or the member value.
    pub summary: Summary,
    pub m_lambda: Option<Summary>,
    pub theory: Option<TheoryPrediction>,
    pub theory_value: Option<f64>,
    pub theory_kind: String,
}

impl GridPoint {
    pub fn lambda_max(&self) -> Vec<f64> {
        self.members
            .iter()
            .filter_map(|r| r.spectrum.as_ref().map(|s| s.lambda_max))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub kind: ExperimentKind,
    pub spec: NetSpec,
    pub master_seed: u64,
    pub ensembles: usize,
    pub points: Vec<GridPoint>,
    pub slopes: Vec<SlopeFit>,
}

impl EnsembleResult {
    pub fn point(&self, m: usize, mode: NormMode) -> Option<&GridPoint> {
        self.points.iter().find(|p| p.m == m && p.mode == mode)
    }
}

/// Measured spectrum of one member, plus the statistics and theory that
/// need the trace.
pub fn measure_member(
    spec: &NetSpec,
    mode: NormMode,
    m: usize,
    t: usize,
    seed: u64,
    keep_spectrum: bool,
    mf: &MeanField,
) -> Result<(SpectrumStats, Option<NormalizationStats>, Option<TheoryPrediction>)> {
    let spec = spec.clone().with_norm(mode);
    let params = init_params(&spec, m, seed)?;
    let batch = Batch::for_params(&params, t, seed);
    let f = reversed_fim_of(&params, &batch, mode)?;
    let s = spectrum(&f, keep_spectrum)?;
    let (stats, theory) = match mode {
        NormMode::BnLastFull | NormMode::Layernorm => {
            let trace = forward(&params, &batch, mode)?;
            let stats = measure_normalization_stats(&trace, mode)?;
            let theory = match &stats {
                NormalizationStats::Batch { sigma_k } => mf.predict_bn_last_full(&spec, m, t, sigma_k)?,
                NormalizationStats::Layer { eta } => mf.predict_layernorm(&spec, m, t, *eta)?,
            };
            (Some(stats), Some(theory))
        }
        _ => (None, None),
    };
    Ok((s, stats, theory))
}

/// Meansub runs use the small-batch point when `T < M`, the bound otherwise.
pub fn meansub_scaling(m: usize, t: usize) -> BatchScaling {
    if t < m {
        BatchScaling::Small
    } else {
        BatchScaling::Big
    }
}

/// Theory for a grid point that does not need measured statistics.
pub fn point_theory(
    mf: &MeanField,
    spec: &NetSpec,
    mode: NormMode,
    m: usize,
    t: usize,
    bn: Option<&BnOrderParams>,
) -> Result<Option<TheoryPrediction>> {
    let spec = spec.clone().with_norm(mode);
    let p = match mode {
        NormMode::None => mf.predict_unnormalized(&spec, m, t)?,
        NormMode::BnLastMeansub => mf.predict_bn_last_meansub(&spec, m, t, meansub_scaling(m, t))?,
        NormMode::BnMiddle => match bn {
            Some(bn) => mf.predict_bn_middle_lower_bound(&spec, m, t, bn)?,
            None => return Ok(None),
        },
        NormMode::BnLastFull | NormMode::Layernorm => return Ok(None),
    };
    Ok(Some(p))
}

/// The value plotted against measured `lambda_max`, and its kind.
pub fn headline(p: &TheoryPrediction) -> (Option<f64>, &'static str) {
    if let Some(v) = p.lambda_max_point {
        (Some(v), "point")
    } else if let Some(v) = p.lambda_max_lower {
        (Some(v), "lower_bound")
    } else {
        (None, "none")
    }
}

fn theory_columns(theory: Option<&TheoryPrediction>, members: &[MemberRecord]) -> (Option<f64>, String) {
    if let Some(p) = theory {
        let (v, k) = headline(p);
        return (v, k.to_string());
    }
    let vals: Vec<(f64, &str)> = members
        .iter()
        .filter_map(|r| r.theory.as_ref())
        .filter_map(|p| match headline(p) {
            (Some(v), k) => Some((v, k)),
            _ => None,
        })
        .collect();
    if vals.is_empty() {
        return (None, "none".into());
    }
    let mean = vals.iter().map(|v| v.0).sum::<f64>() / vals.len() as f64;
    (Some(mean), format!("{}_member_mean", vals[0].1))
}

/// Theory overlay of a grid point, recomputed from meanfield.
pub fn recompute_point_theory(
    cfg: &ExperimentConfig,
    mf: &MeanField,
    point: &GridPoint,
) -> Result<(Option<f64>, String)> {
    let bn = if point.mode == NormMode::BnMiddle {
        Some(bn_middle_order_params(
            &cfg.net.clone().with_norm(NormMode::BnMiddle),
            point.t,
            cfg.mc_samples,
            cfg.master_seed,
        )?)
    } else {
        None
    };
    let theory = point_theory(mf, &cfg.net, point.mode, point.m, point.t, bn.as_ref())?;
    Ok(theory_columns(theory.as_ref(), &point.members))
}

/// Largest-eigenvalue ensembles with `T` set by the batch rule.
pub fn run_fig1(cfg: &ExperimentConfig) -> Result<EnsembleResult> {
    cfg.validate()?;
    let mf = MeanField::new();
    let n = cfg.resolved_ensembles();
    let mut points = Vec::new();
    for m in cfg.resolved_widths() {
        let t = cfg.resolved_batch().batch_for(m);
        for mode in cfg.resolved_modes() {
            let members: Vec<MemberRecord> = (0..n)
                .into_par_iter()
                .map(|k| {
                    let seed = grid_seed(cfg.master_seed, m, k);
                    let (s, stats, theory) =
                        measure_member(&cfg.net, mode, m, t, seed, cfg.keep_spectrum, &mf)?;
                    Ok(MemberRecord {
                        member: k,
                        seed,
                        spectrum: Some(s),
                        value: None,
                        stats,
                        theory,
                    })
                })
                .collect::<Result<_>>()?;
            let lmax: Vec<f64> = members.iter().map(|r| r.spectrum.as_ref().unwrap().lambda_max).collect();
            let ml: Vec<f64> = members.iter().map(|r| r.spectrum.as_ref().unwrap().m_lambda).collect();
            let bn = if mode == NormMode::BnMiddle {
                Some(bn_middle_order_params(
                    &cfg.net.clone().with_norm(mode),
                    t,
                    cfg.mc_samples,
                    cfg.master_seed,
                )?)
            } else {
                None
            };
            let theory = point_theory(&mf, &cfg.net, mode, m, t, bn.as_ref())?;
            let (theory_value, theory_kind) = theory_columns(theory.as_ref(), &members);
            points.push(GridPoint {
                m,
                t,
                mode,
                summary: Summary::of(&lmax),
                m_lambda: Some(Summary::of(&ml)),
                members,
                theory,
                theory_value,
                theory_kind,
            });
        }
    }
    let mut slopes = Vec::new();
    for mode in cfg.resolved_modes() {
        let (xs, ys): (Vec<f64>, Vec<f64>) = points
            .iter()
            .filter(|p| p.mode == mode)
            .map(|p| (p.m as f64, p.summary.mean))
            .unzip();
        if xs.len() >= 2 {
            slopes.push(log_log_fit(&format!("lambda_max_{mode}"), &xs, &ys)?);
        }
    }
    Ok(EnsembleResult {
        kind: cfg.kind,
        spec: cfg.net.clone(),
        master_seed: cfg.master_seed,
        ensembles: n,
        points,
        slopes,
    })
}

/// Ensemble spread of the first-layer backward overlap `qtilde_st[1]`.
pub fn run_convrate(cfg: &ExperimentConfig) -> Result<EnsembleResult> {
    cfg.validate()?;
    let spec = cfg.net.clone().with_norm(NormMode::None);
    let mf = MeanField::new();
    let fwd = mf.forward_order_params(&spec)?;
    let theory = mf.backward_order_params(&spec, &fwd)?.qtilde_st[1];
    let n = cfg.resolved_ensembles();
    let mut points = Vec::new();
    for m in cfg.resolved_widths() {
        let t = cfg.resolved_batch().batch_for(m);
        let members: Vec<MemberRecord> = (0..n)
            .into_par_iter()
            .map(|k| {
                let seed = grid_seed(cfg.master_seed, m, k);
                let params = init_params(&spec, m, seed)?;
                let batch = Batch::for_params(&params, t, seed);
                let b = empirical_backward_order_params(&params, &batch)?;
                Ok(MemberRecord {
                    member: k,
                    seed,
                    spectrum: None,
                    value: Some(b.qtilde_st[1]),
                    stats: None,
                    theory: None,
                })
            })
            .collect::<Result<_>>()?;
        let vals: Vec<f64> = members.iter().map(|r| r.value.unwrap()).collect();
        points.push(GridPoint {
            m,
            t,
            mode: NormMode::None,
            summary: Summary::of(&vals),
            m_lambda: None,
            members,
            theory: None,
            theory_value: Some(theory),
            theory_kind: "qtilde_st_1".into(),
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.m as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.summary.std).collect();
    let slopes = if xs.len() >= 2 {
        vec![log_log_fit("std_qtilde_st_1", &xs, &ys)?]
    } else {
        Vec::new()
    };
    Ok(EnsembleResult {
        kind: cfg.kind,
        spec,
        master_seed: cfg.master_seed,
        ensembles: n,
        points,
        slopes,
    })
}
