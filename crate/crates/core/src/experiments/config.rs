use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meanfield::{NetSpec, NormMode, DEFAULT_MC_SAMPLES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Fig1Sharpness,
    Convrate,
    PhaseDiagram,
    SpectrumOnce,
    PredictOnly,
}

/// How the batch size follows the width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", deny_unknown_fields)]
pub enum BatchRule {
    EqualWidth,
    Fixed { t: usize },
}

impl BatchRule {
    pub fn batch_for(&self, m: usize) -> usize {
        match self {
            BatchRule::EqualWidth => m,
            BatchRule::Fixed { t } => *t,
        }
    }
}

/// Log-spaced learning rates `min * 10^(i / per_decade)` up to `max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EtaGrid {
    pub min: f64,
    pub max: f64,
    pub per_decade: usize,
}

impl Default for EtaGrid {
    fn default() -> Self {
        EtaGrid {
            min: 1e-4,
            max: 1e1,
            per_decade: 40,
        }
    }
}

impl EtaGrid {
    pub fn points(&self) -> Vec<f64> {
        let n = ((self.max / self.min).log10() * self.per_decade as f64 + 1e-9).floor() as usize;
        (0..=n)
            .map(|i| self.min * 10f64.powf(i as f64 / self.per_decade as f64))
            .collect()
    }

    /// Grid spacing in decades.
    pub fn step(&self) -> f64 {
        1.0 / self.per_decade as f64
    }

    /// Index of the grid point closest to `eta` on a log scale.
    pub fn nearest(&self, eta: f64) -> usize {
        let n = self.points().len();
        let i = ((eta / self.min).log10() * self.per_decade as f64).round();
        (i.max(0.0) as usize).min(n - 1)
    }
}

/// How much of the phase-diagram grid gets trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PhaseScan {
    /// Every cell.
    Full,
    /// Walk the grid from the measured stability point until the first
    /// converging and first diverging cells are found; other cells are
    /// recorded as not run.
    #[default]
    Bracket,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Desk,
    Full,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            _ => Err(Error::Config(format!("unknown profile {s:?}, expected desk or full"))),
        }
    }
}

fn default_steps() -> usize {
    1000
}

fn default_threshold() -> f64 {
    1e3
}

fn default_trials() -> usize {
    1
}

fn default_mc() -> usize {
    DEFAULT_MC_SAMPLES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub net: NetSpec,
    /// Base widths `M`; empty means the profile default.
    #[serde(default)]
    pub widths: Vec<usize>,
    /// Batch-size rule; absent means the experiment's default.
    #[serde(default)]
    pub batch: Option<BatchRule>,
    #[serde(default)]
    pub eta_grid: EtaGrid,
    #[serde(default)]
    pub phase_scan: PhaseScan,
    /// Ensemble members per grid point; absent means the profile default.
    #[serde(default)]
    pub ensembles: Option<usize>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default = "default_threshold")]
    pub explosion_threshold: f64,
    /// Normalization modes to run; empty means the experiment's default.
    #[serde(default)]
    pub modes: Vec<NormMode>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    #[serde(default)]
    pub profile: Profile,
    /// Keep full eigenvalue lists in the member records.
    #[serde(default)]
    pub keep_spectrum: bool,
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind, net: NetSpec) -> Self {
        ExperimentConfig {
            kind,
            net,
            widths: Vec::new(),
            batch: None,
            eta_grid: EtaGrid::default(),
            phase_scan: PhaseScan::default(),
            ensembles: None,
            steps: default_steps(),
            master_seed: 0,
            output: None,
            explosion_threshold: default_threshold(),
            modes: Vec::new(),
            trials: default_trials(),
            mc_samples: default_mc(),
            profile: Profile::Desk,
            keep_spectrum: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.net
            .validate()
            .map_err(|e| Error::Config(format!("net: {e}")))?;
        if self.ensembles == Some(0) {
            return Err(Error::Config("ensembles must be at least 1".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("widths must be positive".into()));
        }
        if !(self.explosion_threshold > 0.0) {
            return Err(Error::Config("explosion threshold must be positive".into()));
        }
        let g = &self.eta_grid;
        if !(g.min > 0.0 && g.max > g.min && g.per_decade >= 1) {
            return Err(Error::Config("eta grid needs 0 < min < max and per_decade >= 1".into()));
        }
        if let Some(BatchRule::Fixed { t: 0 }) = self.batch {
            return Err(Error::Config("fixed batch size must be positive".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        Ok(())
    }

    pub fn resolved_widths(&self) -> Vec<usize> {
        if !self.widths.is_empty() {
            return self.widths.clone();
        }
        match (self.profile, self.kind) {
            (Profile::Desk, ExperimentKind::PhaseDiagram) => vec![64, 128, 256],
            (Profile::Desk, ExperimentKind::Convrate) => vec![64, 256, 1024],
            (Profile::Desk, _) => vec![64, 128, 256, 512],
            (Profile::Full, ExperimentKind::Convrate) => vec![64, 256, 1024, 4096],
            (Profile::Full, _) => vec![64, 128, 256, 512, 1024, 2048, 4096],
        }
    }

    pub fn resolved_batch(&self) -> BatchRule {
        if let Some(b) = self.batch {
            return b;
        }
        match self.kind {
            ExperimentKind::Fig1Sharpness | ExperimentKind::PredictOnly => BatchRule::EqualWidth,
            ExperimentKind::PhaseDiagram => BatchRule::Fixed { t: 1000 },
            ExperimentKind::Convrate | ExperimentKind::SpectrumOnce => BatchRule::Fixed { t: 100 },
        }
    }

    pub fn resolved_ensembles(&self) -> usize {
        if let Some(n) = self.ensembles {
            return n;
        }
        match (self.profile, self.kind) {
            (_, ExperimentKind::Convrate) => 100,
            (Profile::Desk, _) => 20,
            (Profile::Full, _) => 100,
        }
    }

    pub fn resolved_modes(&self) -> Vec<NormMode> {
        if !self.modes.is_empty() {
            return self.modes.clone();
        }
        match self.kind {
            ExperimentKind::Fig1Sharpness | ExperimentKind::PhaseDiagram => {
                vec![NormMode::None, NormMode::BnLastMeansub]
            }
            ExperimentKind::PredictOnly => NormMode::ALL.to_vec(),
            _ => vec![self.net.norm_mode],
        }
    }
}
