//! Exact small-scale laboratory for latent-rationale EM on sequence models.
//!
//! The crate enumerates every `(rationale, answer)` pair of a finite task, so
//! posteriors, objectives, gradients and KL terms are all exact. Sampled and
//! planning-based approximations are graded against those exact values.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod math;
pub mod rng;
pub mod task;
pub mod model;
pub mod graph;
pub mod harness;
pub mod planner;
pub mod estep;
pub mod train;
pub mod oracle;

pub use error::{Error, Result};
