use serde::{Deserialize, Serialize};

use super::activation::Activation;
use crate::error::{Error, Result};
use crate::gaussq::QuadratureGrid;

/// Where (and how) normalization is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Plain feedforward network with a linear readout.
    #[default]
    None,
    /// Batch mean subtracted from each output unit, no variance division.
    BnLastMeansub,
    /// Full batch normalization of each output unit.
    BnLastFull,
    /// Batch normalization of every hidden layer; readout left alone.
    BnMiddle,
    /// Layer normalization of every layer including the readout.
    Layernorm,
}

impl NormMode {
    pub const ALL: [NormMode; 5] = [
        NormMode::None,
        NormMode::BnLastMeansub,
        NormMode::BnLastFull,
        NormMode::BnMiddle,
        NormMode::Layernorm,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            NormMode::None => "none",
            NormMode::BnLastMeansub => "bn_last_meansub",
            NormMode::BnLastFull => "bn_last_full",
            NormMode::BnMiddle => "bn_middle",
            NormMode::Layernorm => "layernorm",
        }
    }

    /// Modes whose hidden layers propagate exactly as the plain network.
    pub fn has_plain_hidden_layers(&self) -> bool {
        matches!(
            self,
            NormMode::None | NormMode::BnLastMeansub | NormMode::BnLastFull
        )
    }
}

impl std::fmt::Display for NormMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn one() -> f64 {
    1.0
}

/// Architecture and initialization of the random network ensemble. Shared by
/// the mean-field recurrences and the finite-network laboratory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    /// Number of weight layers `L` (hidden layers plus readout).
    pub depth: usize,
    /// Width ratios of the `L - 1` hidden layers.
    pub alpha: Vec<f64>,
    /// Input width ratio.
    #[serde(default = "one")]
    pub alpha0: f64,
    /// Readout width `C`.
    pub outputs: usize,
    pub sigma_w2: f64,
    pub sigma_b2: f64,
    /// One activation per hidden layer.
    pub activations: Vec<Activation>,
    #[serde(default)]
    pub norm_mode: NormMode,
}

impl NetSpec {
    /// Equal-width network with the same activation in every hidden layer.
    pub fn uniform(
        depth: usize,
        outputs: usize,
        activation: Activation,
        sigma_w2: f64,
        sigma_b2: f64,
    ) -> Self {
        let hidden = depth.saturating_sub(1);
        NetSpec {
            depth,
            alpha: vec![1.0; hidden],
            alpha0: 1.0,
            outputs,
            sigma_w2,
            sigma_b2,
            activations: vec![activation; hidden],
            norm_mode: NormMode::None,
        }
    }

    pub fn with_norm(mut self, mode: NormMode) -> Self {
        self.norm_mode = mode;
        self
    }

    pub fn with_outputs(mut self, outputs: usize) -> Self {
        self.outputs = outputs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidArgument(format!(
                "depth must be at least 2, got {}",
                self.depth
            )));
        }
        if self.alpha.len() != self.depth - 1 {
            return Err(Error::InvalidArgument(format!(
                "expected {} width ratios, got {}",
                self.depth - 1,
                self.alpha.len()
            )));
        }
        if self.activations.len() != self.depth - 1 {
            return Err(Error::InvalidArgument(format!(
                "expected {} activations, got {}",
                self.depth - 1,
                self.activations.len()
            )));
        }
        if !(self.alpha0 > 0.0) || self.alpha.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::InvalidArgument("width ratios must be positive".into()));
        }
        if self.outputs < 1 {
            return Err(Error::InvalidArgument("need at least one output".into()));
        }
        if !(self.sigma_w2 > 0.0 && self.sigma_w2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight variance must be positive, got {}",
                self.sigma_w2
            )));
        }
        if !(self.sigma_b2 >= 0.0 && self.sigma_b2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "bias variance must be nonnegative, got {}",
                self.sigma_b2
            )));
        }
        for a in &self.activations {
            a.validate()?;
        }
        Ok(())
    }

    /// Width ratio of layer `l` for `l = 0..L-1`.
    pub fn ratio(&self, l: usize) -> f64 {
        if l == 0 {
            self.alpha0
        } else {
            self.alpha[l - 1]
        }
    }

    /// `sum_{l=1}^{L-1} alpha_l alpha_{l-1}`.
    pub fn alpha_total(&self) -> f64 {
        (1..self.depth).map(|l| self.ratio(l) * self.ratio(l - 1)).sum()
    }

    pub fn is_non_centered(&self, grid: &QuadratureGrid) -> bool {
        self.sigma_b2 > 0.0 || self.activations.iter().any(|a| !a.is_centered(grid))
    }
}
