//! Experiment runner for generalized meta federated learning: config
//! parsing, multi-seed runs, metrics files, bound reports and comparisons.

pub mod bounds;
pub mod compare;
pub mod config;
pub mod metrics;
pub mod run;

pub use config::ExperimentConfig;
pub use run::{report_bounds, run, RunOptions};
