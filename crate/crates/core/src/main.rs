use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use normfim::experiments::{
    predict_only, run_convrate, run_fig1, run_phase_diagram, spectrum_once, write_outputs,
    ExperimentConfig, ExperimentKind, Profile, RunOutput,
};
use normfim::{Error, Result};

#[derive(Parser)]
#[command(name = "normfim", version, about = "FIM spectra of wide random networks under normalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mean-field predictions only, no networks built.
    Predict(Common),
    /// One network: spectrum, eigenvector alignment and theory.
    Spectrum(Common),
    /// Largest eigenvalue ensembles over widths.
    Fig1(Common),
    /// Convergence rate of the backward order parameters.
    Convrate(Common),
    /// Final training loss over widths and learning rates.
    Phase {
        #[command(flatten)]
        common: Common,
        /// Trials per cell; the cell keeps the minimum final loss.
        #[arg(long)]
        trials: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    profile: Option<Profile>,
}

fn load(common: &Common, kind: ExperimentKind) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if cfg.kind != kind {
        return Err(Error::Config(format!(
            "config is for {:?}, command runs {:?}",
            cfg.kind, kind
        )));
    }
    if let Some(s) = common.seed {
        cfg.master_seed = s;
    }
    if let Some(p) = common.profile {
        cfg.profile = p;
    }
    if let Some(o) = &common.out {
        cfg.output = Some(o.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let (common, kind, trials) = match &cli.command {
        Command::Predict(c) => (c, ExperimentKind::PredictOnly, None),
        Command::Spectrum(c) => (c, ExperimentKind::SpectrumOnce, None),
        Command::Fig1(c) => (c, ExperimentKind::Fig1Sharpness, None),
        Command::Convrate(c) => (c, ExperimentKind::Convrate, None),
        Command::Phase { common, trials } => (common, ExperimentKind::PhaseDiagram, *trials),
    };
    let mut cfg = load(common, kind)?;
    if let Some(n) = trials {
        cfg.trials = n;
    }
    cfg.validate()?;
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let out = match kind {
        ExperimentKind::PredictOnly => RunOutput::Predictions(predict_only(&cfg)?),
        ExperimentKind::SpectrumOnce => RunOutput::Spectrum(Box::new(spectrum_once(&cfg)?)),
        ExperimentKind::Fig1Sharpness => RunOutput::Ensemble(run_fig1(&cfg)?),
        ExperimentKind::Convrate => RunOutput::Ensemble(run_convrate(&cfg)?),
        ExperimentKind::PhaseDiagram => RunOutput::Phase(run_phase_diagram(&cfg)?),
    };
    let dir = cfg
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from("out").join(format!("{kind:?}").to_lowercase()));
    let files = write_outputs(&dir, &cfg, &out)?;
    report(&out);
    println!("wrote {} files to {}", files.len(), dir.display());
    Ok(())
}

fn report(out: &RunOutput) {
    match out {
        RunOutput::Ensemble(r) => {
            for p in &r.points {
                let theory = p.theory_value.map_or("-".to_string(), |v| format!("{v:.6}"));
                println!(
                    "M={:<5} T={:<5} {:<16} mean={:<12.6} std={:<12.6} theory={} ({})",
                    p.m, p.t, p.mode, p.summary.mean, p.summary.std, theory, p.theory_kind
                );
            }
            for s in &r.slopes {
                println!("slope {}: {:.4} +- {:.4}", s.label, s.slope, s.stderr);
            }
        }
        RunOutput::Phase(d) => {
            for r in &d.rows {
                let b = r.boundary.map_or("-".to_string(), |v| format!("{v:.4e}"));
                println!(
                    "M={:<5} {:<16} 2/lambda_max={:.4e} boundary={}",
                    r.m, r.mode, r.eta_measured, b
                );
            }
        }
        RunOutput::Predictions(recs) => {
            for r in recs {
                match (r.prediction.ok(), r.prediction.error()) {
                    (Some(p), _) => println!(
                        "M={:<5} T={:<5} {:<16} {} m_lambda={:?} point={:?} lower={:?} upper={:?}",
                        r.m, r.t, r.mode, p.regime.as_str(), p.m_lambda, p.lambda_max_point,
                        p.lambda_max_lower, p.lambda_max_upper
                    ),
                    (_, Some(e)) => println!("M={:<5} T={:<5} {:<16} {}: {}", r.m, r.t, r.mode, e.kind, e.message),
                    _ => {}
                }
            }
        }
        RunOutput::Spectrum(s) => {
            println!(
                "M={} T={} {} lambda_max={:.6} m_lambda={:.6e} s_lambda={:.6e}",
                s.m, s.t, s.mode, s.spectrum.lambda_max, s.spectrum.m_lambda, s.spectrum.s_lambda
            );
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error ({}): {e}", e.kind());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
