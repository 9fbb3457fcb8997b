//! Synthetic designs and the Monte-Carlo harness: staggered adoption,
//! multi-treatment interactive effects, and the tobacco adoption protocol
//! on a synthetic sales matrix.

pub mod config;
pub mod experiment;
pub mod generate;
pub mod report;

pub use config::{Design, Preset, SimConfig};
pub use experiment::{
    run_coverage_experiment, run_experiment, run_rmse_experiment, ExperimentReport, ReplicationRecord, Summary,
};
