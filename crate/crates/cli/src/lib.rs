//! Experiment runner: base training, applicability sweeps, predictor
//! training, CactusNet growth and report bundles.

pub mod commands;
pub mod config;

pub use commands::{CmdError, CmdResult, OutPaths};
pub use config::{ExperimentConfig, Overrides};
