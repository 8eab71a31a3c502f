//! Configuration, ensembles, training and the reproduction runs.

pub mod config;
pub mod ensemble;
pub mod gd;
pub mod output;
pub mod phase;
pub mod single;

pub use config::{BatchRule, EtaGrid, ExperimentConfig, ExperimentKind, PhaseScan, Profile};
pub use ensemble::{
    grid_seed, log_log_fit, measure_member, run_convrate, run_fig1, EnsembleResult, GridPoint,
    MemberRecord, SlopeFit, Summary,
};
pub use gd::{gd_train, make_teacher_labels, Trajectory};
pub use phase::{run_phase_diagram, CellStatus, PhaseCell, PhaseDiagram, PhaseRow, TrialOutcome};
pub use single::{predict_only, spectrum_once, ErrorRecord, Outcome, PredictionRecord, SpectrumReport};
pub use output::{load_and_verify, verify_overlays, write_outputs, Metadata, RunOutput};
