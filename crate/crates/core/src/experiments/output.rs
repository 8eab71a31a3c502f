use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ExperimentKind};
use super::ensemble::{recompute_point_theory, EnsembleResult};
use super::phase::{CellStatus, PhaseDiagram};
use super::single::{PredictionRecord, SpectrumReport};
use crate::error::{Error, Result};
use crate::meanfield::{BatchScaling, MeanField, NormMode};

/// Echo of the run, written next to the data tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub tool: String,
    pub version: String,
    pub kind: ExperimentKind,
    pub config: ExperimentConfig,
    pub widths: Vec<usize>,
    pub ensembles: usize,
    pub modes: Vec<NormMode>,
    pub master_seed: u64,
    pub files: Vec<String>,
}

impl Metadata {
    /// The output path is left out of the echo so artifacts do not depend
    /// on where they are written.
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let mut config = cfg.clone();
        config.output = None;
        Metadata {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            kind: cfg.kind,
            config,
            widths: cfg.resolved_widths(),
            ensembles: cfg.resolved_ensembles(),
            modes: cfg.resolved_modes(),
            master_seed: cfg.master_seed,
            files: Vec::new(),
        }
    }
}

/// Anything a run can hand to the writer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "data")]
pub enum RunOutput {
    Ensemble(EnsembleResult),
    Phase(PhaseDiagram),
    Predictions(Vec<PredictionRecord>),
    Spectrum(Box<SpectrumReport>),
}

struct Writer {
    dir: PathBuf,
    files: Vec<String>,
}

impl Writer {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Writer {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(v)?;
        text.push('\n');
        self.text(name, &text)
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        fs::write(self.dir.join(name), text)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.dir.join(name))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }
}

#[derive(Serialize)]
struct Fig1Row<'a> {
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "T")]
    t: usize,
    mode: &'a str,
    ensemble_mean_lambda_max: f64,
    ensemble_std: f64,
    theory_value: Option<f64>,
    theory_kind: &'a str,
}

#[derive(Serialize)]
struct MemberRow<'a> {
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "T")]
    t: usize,
    mode: &'a str,
    member: usize,
    seed: u64,
    lambda_max: Option<f64>,
    m_lambda: Option<f64>,
    s_lambda: Option<f64>,
    value: Option<f64>,
}

#[derive(Serialize)]
struct ConvrateRow {
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "T")]
    t: usize,
    ensembles: usize,
    mean_qtilde_st: f64,
    std_qtilde_st: f64,
    theory_qtilde_st: Option<f64>,
}

#[derive(Serialize)]
struct PhaseCellRow<'a> {
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "T")]
    t: usize,
    mode: &'a str,
    eta_index: usize,
    eta: f64,
    status: &'a str,
    min_loss: Option<f64>,
    trials: usize,
    trials_diverged: usize,
}

#[derive(Serialize)]
struct PhaseLineRow<'a> {
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "T")]
    t: usize,
    mode: &'a str,
    lambda_max: f64,
    eta_measured: f64,
    eta_theory: Option<f64>,
    boundary_eta: Option<f64>,
    boundary_offset_steps: Option<f64>,
}

const FIG1_GP: &str = r#"set datafile separator ","
set key autotitle columnhead
set logscale xy
set xlabel "M"
set ylabel "lambda_max"
set terminal pngcairo size 800,600
set output "fig1.png"
is(m) = strcol(3) eq m
plot "fig1.csv" using 1:(is("none") ? $4 : 1/0):5 with yerrorpoints title "none", \
     "" using 1:(is("none") ? $6 : 1/0) with lines dt 2 title "theory none", \
     "" using 1:(is("bn_last_meansub") ? $4 : 1/0):5 with yerrorpoints title "bn_last_meansub", \
     "" using 1:(is("bn_last_meansub") ? $6 : 1/0) with lines dt 2 title "bound bn_last_meansub"
"#;

const CONVRATE_GP: &str = r#"set datafile separator ","
set key autotitle columnhead
set logscale xy
set xlabel "M"
set ylabel "std of qtilde_st[1]"
set terminal pngcairo size 800,600
set output "convrate.png"
f(x) = a * x**b
a = 1; b = -0.5
fit f(x) "convrate.csv" using 1:5 via a, b
plot "convrate.csv" using 1:5 with points pt 7 title "ensemble std", f(x) title sprintf("slope %.3f", b)
"#;

const PHASE_GP: &str = r#"set datafile separator ","
set key autotitle columnhead
set logscale xy
set logscale cb
set xlabel "M"
set ylabel "eta"
set cblabel "final loss"
set terminal pngcairo size 1200,500
set output "phase.png"
set multiplot layout 1,2
do for [mode in "none bn_last_meansub"] {
    set title mode
    plot "phase_cells.csv" using 1:(strcol(3) eq mode && strcol(6) eq "converged" ? $5 : 1/0):7 with points pt 5 ps 1.5 palette notitle, \
         "" using 1:(strcol(3) eq mode && strcol(6) eq "diverged" ? $5 : 1/0) with points pt 5 ps 1.5 lc rgb "gray" title "exploded", \
         "phase_lines.csv" using 1:(strcol(3) eq mode ? $5 : 1/0) with linespoints lc rgb "red" title "2/lambda_max", \
         "" using 1:(strcol(3) eq mode ? $6 : 1/0) with linespoints lc rgb "blue" title "2/(rho alpha (kappa1-kappa2))"
}
unset multiplot
"#;

/// Write the metadata JSON, the full result, CSV tables and a gnuplot
/// script into `dir`. Returns the file names written.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> Result<Vec<String>> {
    let mut w = Writer::new(dir)?;
    w.json("result.json", out)?;
    match out {
        RunOutput::Ensemble(r) if r.kind == ExperimentKind::Convrate => {
            let rows: Vec<ConvrateRow> = r
                .points
                .iter()
                .map(|p| ConvrateRow {
                    m: p.m,
                    t: p.t,
                    ensembles: p.members.len(),
                    mean_qtilde_st: p.summary.mean,
                    std_qtilde_st: p.summary.std,
                    theory_qtilde_st: p.theory_value,
                })
                .collect();
            w.csv("convrate.csv", &rows)?;
            member_rows(&mut w, "convrate_members.csv", r)?;
            w.csv("convrate_slopes.csv", &r.slopes)?;
            w.text("convrate.gp", CONVRATE_GP)?;
        }
        RunOutput::Ensemble(r) => {
            let rows: Vec<Fig1Row> = r
                .points
                .iter()
                .map(|p| Fig1Row {
                    m: p.m,
                    t: p.t,
                    mode: p.mode.as_str(),
                    ensemble_mean_lambda_max: p.summary.mean,
                    ensemble_std: p.summary.std,
                    theory_value: p.theory_value,
                    theory_kind: &p.theory_kind,
                })
                .collect();
            w.csv("fig1.csv", &rows)?;
            member_rows(&mut w, "fig1_members.csv", r)?;
            w.csv("fig1_slopes.csv", &r.slopes)?;
            w.text("fig1.gp", FIG1_GP)?;
        }
        RunOutput::Phase(d) => {
            let mut cells = Vec::new();
            let mut lines = Vec::new();
            for r in &d.rows {
                for c in &r.cells {
                    cells.push(PhaseCellRow {
                        m: r.m,
                        t: r.t,
                        mode: r.mode.as_str(),
                        eta_index: c.eta_index,
                        eta: c.eta,
                        status: match c.status {
                            CellStatus::Converged => "converged",
                            CellStatus::Diverged => "diverged",
                            CellStatus::NotRun => "not_run",
                        },
                        min_loss: c.min_loss,
                        trials: c.trials.len(),
                        trials_diverged: c.trials.iter().filter(|o| o.diverged).count(),
                    });
                }
                lines.push(PhaseLineRow {
                    m: r.m,
                    t: r.t,
                    mode: r.mode.as_str(),
                    lambda_max: r.lambda_max[0],
                    eta_measured: r.eta_measured,
                    eta_theory: r.eta_theory,
                    boundary_eta: r.boundary,
                    boundary_offset_steps: r.boundary_offset(cfg.eta_grid.per_decade),
                });
            }
            w.csv("phase_cells.csv", &cells)?;
            w.csv("phase_lines.csv", &lines)?;
            w.text("phase.gp", PHASE_GP)?;
        }
        RunOutput::Predictions(_) | RunOutput::Spectrum(_) => {}
    }
    let mut meta = Metadata::new(cfg);
    meta.files = w.files.clone();
    meta.files.push("metadata.json".into());
    w.json("metadata.json", &meta)?;
    Ok(w.files)
}

fn member_rows(w: &mut Writer, name: &str, r: &EnsembleResult) -> Result<()> {
    let mut rows = Vec::new();
    for p in &r.points {
        for rec in &p.members {
            rows.push(MemberRow {
                m: p.m,
                t: p.t,
                mode: p.mode.as_str(),
                member: rec.member,
                seed: rec.seed,
                lambda_max: rec.spectrum.as_ref().map(|s| s.lambda_max),
                m_lambda: rec.spectrum.as_ref().map(|s| s.m_lambda),
                s_lambda: rec.spectrum.as_ref().map(|s| s.s_lambda),
                value: rec.value,
            });
        }
    }
    w.csv(name, &rows)
}

/// Read back `result.json` and check every stored theory overlay against a
/// fresh mean-field computation.
pub fn load_and_verify(dir: &Path) -> Result<(Metadata, RunOutput)> {
    let meta: Metadata = serde_json::from_str(&fs::read_to_string(dir.join("metadata.json"))?)?;
    let out: RunOutput = serde_json::from_str(&fs::read_to_string(dir.join("result.json"))?)?;
    verify_overlays(&meta.config, &out)?;
    Ok((meta, out))
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1e-300),
        _ => false,
    }
}

pub fn verify_overlays(cfg: &ExperimentConfig, out: &RunOutput) -> Result<()> {
    let mf = MeanField::new();
    let stale = |what: String| Err(Error::Numerical(format!("stale theory overlay: {what}")));
    match out {
        RunOutput::Ensemble(r) if r.kind == ExperimentKind::Convrate => {
            let spec = cfg.net.clone().with_norm(NormMode::None);
            let fwd = mf.forward_order_params(&spec)?;
            let v = mf.backward_order_params(&spec, &fwd)?.qtilde_st[1];
            for p in &r.points {
                if !close(p.theory_value, Some(v)) {
                    return stale(format!("M = {}", p.m));
                }
            }
        }
        RunOutput::Ensemble(r) => {
            for p in &r.points {
                let (v, kind) = recompute_point_theory(cfg, &mf, p)?;
                if !close(v, p.theory_value) || kind != p.theory_kind {
                    return stale(format!("M = {}, mode {}", p.m, p.mode));
                }
            }
        }
        RunOutput::Phase(d) => {
            for r in &d.rows {
                let v = if r.mode == NormMode::BnLastMeansub {
                    let spec = cfg.net.clone().with_norm(r.mode);
                    mf.predict_bn_last_meansub(&spec, r.m, r.t, BatchScaling::Big)?
                        .lambda_max_lower
                        .map(|l| 2.0 / l)
                } else {
                    None
                };
                if !close(v, r.eta_theory) || !close(Some(2.0 / r.lambda_max[0]), Some(r.eta_measured)) {
                    return stale(format!("M = {}, mode {}", r.m, r.mode));
                }
            }
        }
        RunOutput::Predictions(_) | RunOutput::Spectrum(_) => {}
    }
    Ok(())
}
