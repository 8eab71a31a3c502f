use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, PhaseScan};
use super::ensemble::grid_seed;
use super::gd::{gd_train, make_teacher_labels};
use crate::error::Result;
use crate::fimlab::{reversed_fim_of, spectrum};
use crate::meanfield::{MeanField, NetSpec, NormMode};
use crate::netlab::{init_params, Batch};
use crate::rng::teacher_seed;

/// Coarse stride of the bracket scan, in grid points.
const BRACKET_STRIDE: usize = 4;
/// The bracket scan starts this many grid points below the measured `2 / lambda_max`.
const BRACKET_START_OFFSET: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Converged,
    /// Every trial crossed the threshold or went non-finite.
    Diverged,
    NotRun,
}

/// One training outcome per trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub seed: u64,
    pub initial_loss: f64,
    /// Loss after the last step; infinite when the run went non-finite.
    pub final_loss: f64,
    pub diverged: bool,
    pub steps_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseCell {
    pub eta_index: usize,
    pub eta: f64,
    pub status: CellStatus,
    /// Minimum final loss over trials.
    pub min_loss: Option<f64>,
    pub trials: Vec<TrialOutcome>,
}

/// One width under one mode: the row of cells and its overlays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRow {
    pub m: usize,
    pub t: usize,
    pub mode: NormMode,
    /// `lambda_max` of the FIM at initialization, one per trial.
    pub lambda_max: Vec<f64>,
    /// `2 / lambda_max` from the trial-0 network.
    pub eta_measured: f64,
    /// `2 / (rho alpha (kappa1 - kappa2))` for mean subtraction.
    pub eta_theory: Option<f64>,
    /// Smallest diverging learning rate found above a converging one.
    pub boundary: Option<f64>,
    pub boundary_index: Option<usize>,
    pub cells: Vec<PhaseCell>,
}

impl PhaseRow {
    /// Distance in grid steps between the boundary and `eta_measured`.
    pub fn boundary_offset(&self, per_decade: usize) -> Option<f64> {
        self.boundary
            .map(|b| (b / self.eta_measured).log10() * per_decade as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseDiagram {
    pub spec: NetSpec,
    pub master_seed: u64,
    pub steps: usize,
    pub threshold: f64,
    pub scan: PhaseScan,
    pub trials: usize,
    pub etas: Vec<f64>,
    pub rows: Vec<PhaseRow>,
}

impl PhaseDiagram {
    pub fn row(&self, m: usize, mode: NormMode) -> Option<&PhaseRow> {
        self.rows.iter().find(|r| r.m == m && r.mode == mode)
    }
}

/// Student, batch and labels of one trial.
struct TrialSetup {
    seed: u64,
    params: crate::netlab::Params,
    batch: Batch,
    labels: nalgebra::DMatrix<f64>,
}

fn setup(spec: &NetSpec, mode: NormMode, m: usize, t: usize, seed: u64) -> Result<TrialSetup> {
    let spec = spec.clone().with_norm(mode);
    let params = init_params(&spec, m, seed)?;
    let batch = Batch::for_params(&params, t, seed);
    let labels = make_teacher_labels(&spec, m, &batch, teacher_seed(seed))?;
    Ok(TrialSetup {
        seed,
        params,
        batch,
        labels,
    })
}

fn run_cell(
    cfg: &ExperimentConfig,
    trials: &[TrialSetup],
    mode: NormMode,
    eta_index: usize,
    eta: f64,
) -> Result<PhaseCell> {
    let outcomes: Vec<TrialOutcome> = trials
        .par_iter()
        .map(|s| {
            let mut p = s.params.clone();
            let tr = gd_train(&mut p, &s.batch, &s.labels, mode, eta, cfg.steps, cfg.explosion_threshold)?;
            Ok(TrialOutcome {
                seed: s.seed,
                initial_loss: tr.initial(),
                final_loss: tr.last(),
                diverged: tr.diverged,
                steps_run: tr.steps_run,
            })
        })
        .collect::<Result<_>>()?;
    let all_diverged = outcomes.iter().all(|o| o.diverged);
    let min_loss = outcomes
        .iter()
        .map(|o| o.final_loss)
        .fold(f64::INFINITY, f64::min);
    Ok(PhaseCell {
        eta_index,
        eta,
        status: if all_diverged {
            CellStatus::Diverged
        } else {
            CellStatus::Converged
        },
        min_loss: Some(min_loss),
        trials: outcomes,
    })
}

/// Find the first diverging grid point above a converging one, starting
/// near `start`. Returns the boundary index, if any.
fn bracket<F>(n: usize, start: usize, mut diverges: F) -> Result<Option<usize>>
where
    F: FnMut(usize) -> Result<bool>,
{
    let (lo, hi) = if diverges(start)? {
        let mut hi = start;
        loop {
            if hi == 0 {
                return Ok(Some(0));
            }
            let i = hi.saturating_sub(BRACKET_STRIDE);
            if diverges(i)? {
                hi = i;
            } else {
                break (i, hi);
            }
        }
    } else {
        let mut lo = start;
        loop {
            if lo + 1 >= n {
                return Ok(None);
            }
            let i = (lo + BRACKET_STRIDE).min(n - 1);
            if diverges(i)? {
                break (lo, i);
            }
            lo = i;
        }
    };
    for i in lo + 1..hi {
        if diverges(i)? {
            return Ok(Some(i));
        }
    }
    Ok(Some(hi))
}

fn run_row(cfg: &ExperimentConfig, mf: &MeanField, m: usize, mode: NormMode) -> Result<PhaseRow> {
    let t = cfg.resolved_batch().batch_for(m);
    let trials: Vec<TrialSetup> = (0..cfg.trials)
        .map(|k| setup(&cfg.net, mode, m, t, grid_seed(cfg.master_seed, m, k)))
        .collect::<Result<_>>()?;
    let lambda_max: Vec<f64> = trials
        .par_iter()
        .map(|s| Ok(spectrum(&reversed_fim_of(&s.params, &s.batch, mode)?, false)?.lambda_max))
        .collect::<Result<_>>()?;
    let eta_measured = 2.0 / lambda_max[0];
    let eta_theory = if mode == NormMode::BnLastMeansub {
        let spec = cfg.net.clone().with_norm(mode);
        let p = mf.predict_bn_last_meansub(&spec, m, t, crate::meanfield::BatchScaling::Big)?;
        p.lambda_max_lower.map(|l| 2.0 / l)
    } else {
        None
    };
    let grid = cfg.eta_grid;
    let etas = grid.points();
    let n = etas.len();
    let mut done: BTreeMap<usize, PhaseCell> = BTreeMap::new();
    let boundary_index = match cfg.phase_scan {
        PhaseScan::Full => {
            let cells: Vec<PhaseCell> = (0..n)
                .into_par_iter()
                .map(|i| run_cell(cfg, &trials, mode, i, etas[i]))
                .collect::<Result<_>>()?;
            for c in cells {
                done.insert(c.eta_index, c);
            }
            (1..n).find(|&i| {
                done[&i].status == CellStatus::Diverged && done[&(i - 1)].status == CellStatus::Converged
            })
        }
        PhaseScan::Bracket => {
            let start = grid.nearest(eta_measured).saturating_sub(BRACKET_START_OFFSET);
            let b = bracket(n, start, |i| {
                if let std::collections::btree_map::Entry::Vacant(e) = done.entry(i) {
                    e.insert(run_cell(cfg, &trials, mode, i, etas[i])?);
                }
                Ok(done[&i].status == CellStatus::Diverged)
            })?;
            // one decade below the boundary, for the convergence check
            if let Some(i) = b.and_then(|i| i.checked_sub(grid.per_decade)) {
                if let std::collections::btree_map::Entry::Vacant(e) = done.entry(i) {
                    e.insert(run_cell(cfg, &trials, mode, i, etas[i])?);
                }
            }
            b
        }
    };
    let cells = (0..n)
        .map(|i| {
            done.remove(&i).unwrap_or(PhaseCell {
                eta_index: i,
                eta: etas[i],
                status: CellStatus::NotRun,
                min_loss: None,
                trials: Vec::new(),
            })
        })
        .collect();
    Ok(PhaseRow {
        m,
        t,
        mode,
        lambda_max,
        eta_measured,
        eta_theory,
        boundary: boundary_index.map(|i| etas[i]),
        boundary_index,
        cells,
    })
}

/// Final training loss over widths and learning rates, one row per
/// `(M, mode)`. Trials of a cell share the learning rate and differ in seed.
pub fn run_phase_diagram(cfg: &ExperimentConfig) -> Result<PhaseDiagram> {
    cfg.validate()?;
    let mf = MeanField::new();
    let jobs: Vec<(usize, NormMode)> = cfg
        .resolved_widths()
        .into_iter()
        .flat_map(|m| cfg.resolved_modes().into_iter().map(move |mode| (m, mode)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(m, mode)| run_row(cfg, &mf, m, mode))
        .collect::<Result<_>>()?;
    Ok(PhaseDiagram {
        spec: cfg.net.clone(),
        master_seed: cfg.master_seed,
        steps: cfg.steps,
        threshold: cfg.explosion_threshold,
        scan: cfg.phase_scan,
        trials: cfg.trials,
        etas: cfg.eta_grid.points(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::config::{ExperimentKind, EtaGrid};
    use crate::meanfield::Activation;

    #[test]
    fn bracket_finds_step() {
        for edge in [0usize, 3, 17, 18, 40] {
            for start in [0usize, 5, 20, 39] {
                let mut calls = 0;
                let b = bracket(41, start, |i| {
                    calls += 1;
                    Ok(i >= edge)
                })
                .unwrap();
                assert_eq!(b, Some(edge), "edge {edge} start {start}");
                assert!(calls <= 41);
            }
        }
        assert_eq!(bracket(10, 2, |_| Ok(false)).unwrap(), None);
    }

    #[test]
    fn small_diagram_runs() {
        let spec = NetSpec::uniform(3, 1, Activation::Relu, 4.0, 1.0);
        let mut cfg = ExperimentConfig::new(ExperimentKind::PhaseDiagram, spec);
        cfg.widths = vec![16];
        cfg.batch = Some(crate::experiments::config::BatchRule::Fixed { t: 20 });
        cfg.eta_grid = EtaGrid {
            min: 1e-3,
            max: 10.0,
            per_decade: 4,
        };
        cfg.steps = 50;
        cfg.trials = 2;
        let d = run_phase_diagram(&cfg).unwrap();
        assert_eq!(d.rows.len(), 2);
        for r in &d.rows {
            assert_eq!(r.cells.len(), d.etas.len());
            assert_eq!(r.lambda_max.len(), 2);
            let b = r.boundary_index.expect("largest rates must blow up");
            assert_eq!(r.cells[b].status, CellStatus::Diverged);
            assert_eq!(r.cells[b - 1].status, CellStatus::Converged);
            for c in r.cells.iter().filter(|c| c.status != CellStatus::NotRun) {
                assert_eq!(c.trials.len(), 2);
            }
        }
        assert!(d.row(16, NormMode::BnLastMeansub).unwrap().eta_theory.is_some());
        // the full scan agrees where the bracket ran
        cfg.phase_scan = PhaseScan::Full;
        let full = run_phase_diagram(&cfg).unwrap();
        for (a, b) in d.rows.iter().zip(&full.rows) {
            for (x, y) in a.cells.iter().zip(&b.cells) {
                if x.status != CellStatus::NotRun {
                    assert_eq!(x, y);
                }
            }
        }
    }
}
