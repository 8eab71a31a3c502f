// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiments;
pub mod fimlab;
pub mod gaussq;
pub mod meanfield;
pub mod netlab;
pub mod rng;


pub use error::{Error, Result};
