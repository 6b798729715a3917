//! Batch multi-fidelity active learning with a deep Bayesian surrogate.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acquisition;
pub mod active;
pub mod cost;
pub mod dataset;
pub mod delta;
pub mod error;
pub mod gaussian;
pub mod linalg;
pub mod model;
pub mod optimizer;
pub mod planner;
pub mod simulators;
pub mod tape;
pub mod types;

pub use dataset::{Dataset, Example};
pub use error::{Error, Result};
pub use types::{Fidelity, Query};
