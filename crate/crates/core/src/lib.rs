//! Sub-optimal moving horizon estimation in closed loop with a Lipschitz
//! state-feedback law, plus the small-gain analysis that picks the solver
//! iteration budget and runtime monitors for every per-step bound.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod config;
pub mod controller;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod mhe;
pub mod model;
pub mod qp;
pub mod sampling;
pub mod solver;

pub use error::{Error, Result};
