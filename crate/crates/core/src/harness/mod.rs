//! Experiment harness: configs, seeded runs, reports, comparisons and the
//! property suite.

pub mod compare;
pub mod config;
pub mod report;
pub mod run;
pub mod suite;
pub mod verify;

pub use compare::{cmd_compare, Comparison};
pub use config::ExperimentConfig;
pub use report::cmd_report;
pub use run::{cmd_run, RunOutcome};
pub use verify::{cmd_verify, VerifyOptions, VerifyReport};
