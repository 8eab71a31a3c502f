//! Order-parameter recurrences and the eigenvalue predictions built on them.

pub mod activation;
pub mod bn;
pub mod order;
pub mod predict;
pub mod spec;

pub use activation::{arccos_kernel, Activation};
pub use bn::{bn_middle_order_params, BnMethod, BnOrderParams, DEFAULT_MC_SAMPLES};
pub use order::{KappaPair, MeanField, OrderParams, RecurrenceFamily};
pub use predict::{rate_exponents, BatchScaling, LayerEta, Regime, TheoryPrediction, RATE_Q};
pub use spec::{NetSpec, NormMode};
