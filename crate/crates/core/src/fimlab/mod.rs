//! Reversed FIM construction, spectra and the structural checks built on
//! them.

pub mod align;
pub mod checks;
pub mod matrix;
pub mod spectrum;
pub mod stats;

pub use align::{top_eigvec_alignment, AlignmentReport};
pub use checks::hessian_fim_consistency;
pub use matrix::{
    apply_variance_projector, project_mean_subtraction, reversed_fim, reversed_fim_of,
    ReversedFIM, VarianceProjected,
};
pub use spectrum::{nonzero_eigenvalues, spectrum, EigenMethod, SpectrumStats, DENSE_LIMIT};
pub use stats::{measure_normalization_stats, NormalizationStats};
