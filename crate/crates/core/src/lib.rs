//! Federated dataset distillation for multiple-instance learning on
//! simulated whole-slide feature bags.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cohort;
pub mod distill;
pub mod error;
pub mod federation;
pub mod gmm;
pub mod metrics;
pub mod mil;
pub mod numeric;
pub mod presets;
pub mod privacy;

pub use error::{Error, Result};
