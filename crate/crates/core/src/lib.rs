//! Multiple causal estimation with information.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod ami;
pub mod baselines;
pub mod confounder;
pub mod dataset;
pub mod error;
pub mod gaussian;
pub mod harness;
pub mod numeric;
pub mod outcome;
pub mod residuals;
pub mod simulation;

pub use error::{Error, Result};
