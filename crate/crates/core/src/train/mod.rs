//! Training: the EM loop and the baselines it is compared against.

pub mod baselines;
pub mod em;
pub mod dpo;
pub mod mstep;

pub use em::{
    brite_iterate, greedy_accuracy, reference_gap, reference_optimum, run_brite, run_brite_with, sampled_accuracy,
    BriteConfig, Certificate, IterRow, RefGap, RunOutput, RunRecord,
};
pub use mstep::{mstep, surrogate, MStepSpec};
