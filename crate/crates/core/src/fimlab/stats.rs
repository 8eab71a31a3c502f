use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meanfield::{LayerEta, NormMode};
use crate::netlab::ForwardTrace;

/// Plug-in statistics of the last-layer normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NormalizationStats {
    /// Batch scales `sigma_k` of each readout unit.
    Batch { sigma_k: Vec<f64> },
    /// Layer-norm readout constants.
    Layer { eta: LayerEta },
}

impl NormalizationStats {
    pub fn sigma_k(&self) -> Option<&[f64]> {
        match self {
            NormalizationStats::Batch { sigma_k } => Some(sigma_k),
            _ => None,
        }
    }

    pub fn eta(&self) -> Option<LayerEta> {
        match self {
            NormalizationStats::Layer { eta } => Some(*eta),
            _ => None,
        }
    }
}

/// `eta_1`, `eta_2`, `eta_3` from the readout centered across units.
pub fn layer_eta(u: &DMatrix<f64>) -> Result<LayerEta> {
    let (c, t) = u.shape();
    let mut ubar = u.clone();
    for mut col in ubar.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let mut sd = Vec::with_capacity(t);
    for (j, col) in ubar.column_iter().enumerate() {
        let var = col.norm_squared() / c as f64;
        if !(var > 0.0 && var.is_finite()) {
            return Err(Error::DegenerateNormalization { layer: 0, index: j });
        }
        sd.push(var.sqrt());
    }
    let tf = t as f64;
    let eta1 = sd.iter().map(|s| 1.0 / (s * s)).sum::<f64>() / tf;
    let eta2 = sd.iter().map(|s| 1.0 / s.powi(4)).sum::<f64>() / tf;
    let gram = ubar.transpose() * &ubar;
    let mut eta3 = 0.0;
    for a in 0..t {
        for b in 0..t {
            let g = gram[(a, b)] / (c as f64 * sd[a] * sd[b]);
            eta3 += g / (sd[a] * sd[b]);
        }
    }
    eta3 /= tf * tf;
    Ok(LayerEta { eta1, eta2, eta3 })
}

/// Statistics consumed by the full batch-norm and layer-norm predictions.
pub fn measure_normalization_stats(trace: &ForwardTrace, mode: NormMode) -> Result<NormalizationStats> {
    if trace.mode != mode {
        return Err(Error::InvalidArgument(format!(
            "trace was recorded under {}, asked for {mode}",
            trace.mode
        )));
    }
    let u = &trace.pre[trace.depth() - 1];
    match mode {
        NormMode::BnLastMeansub | NormMode::BnLastFull => {
            let c = trace.centered_readout();
            let t = c.ncols() as f64;
            let mut sigma_k = Vec::with_capacity(c.nrows());
            for (k, row) in c.row_iter().enumerate() {
                let var = row.norm_squared() / t;
                if !(var > 0.0 && var.is_finite()) {
                    return Err(Error::DegenerateNormalization {
                        layer: trace.depth(),
                        index: k,
                    });
                }
                sigma_k.push(var.sqrt());
            }
            Ok(NormalizationStats::Batch { sigma_k })
        }
        NormMode::Layernorm => Ok(NormalizationStats::Layer { eta: layer_eta(u)? }),
        _ => Err(Error::InvalidArgument(format!(
            "no readout normalization statistics under {mode}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meanfield::{Activation, NetSpec};
    use crate::netlab::{forward, init_params, Batch};

    #[test]
    fn standardized_readout_has_unit_scale() {
        let spec = NetSpec::uniform(3, 2, Activation::Relu, 2.0, 0.1);
        let p = init_params(&spec, 16, 0).unwrap();
        let b = Batch::for_params(&p, 9, 0);
        let tr = forward(&p, &b, NormMode::BnLastFull).unwrap();
        // feed the standardized outputs back as a readout
        let mut tr2 = tr.clone();
        let depth = tr.depth();
        tr2.pre[depth - 1] = tr.output.clone();
        let s = measure_normalization_stats(&tr2, NormMode::BnLastFull).unwrap();
        for v in s.sigma_k().unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eta_jensen() {
        let spec = NetSpec::uniform(3, 4, Activation::Relu, 2.0, 0.1).with_norm(NormMode::Layernorm);
        let p = init_params(&spec, 32, 0).unwrap();
        let b = Batch::for_params(&p, 12, 0);
        let tr = forward(&p, &b, NormMode::Layernorm).unwrap();
        let eta = measure_normalization_stats(&tr, NormMode::Layernorm).unwrap().eta().unwrap();
        assert!(eta.eta2 >= eta.eta1 * eta.eta1);
        assert!(eta.eta1 > 0.0);
    }

    #[test]
    fn mode_mismatch() {
        let spec = NetSpec::uniform(3, 4, Activation::Relu, 2.0, 0.1);
        let p = init_params(&spec, 8, 0).unwrap();
        let b = Batch::for_params(&p, 5, 0);
        let tr = forward(&p, &b, NormMode::None).unwrap();
        assert!(measure_normalization_stats(&tr, NormMode::Layernorm).is_err());
        assert!(measure_normalization_stats(&tr, NormMode::None).is_err());
    }
}
