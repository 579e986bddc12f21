//! Experiment harness: configuration, orchestration and artifact emission
//! for the speculative decoding fairness toolkit.

pub mod cli;
pub mod commands;
pub mod config;
pub mod output;
pub mod report;
pub mod svg;

pub use commands::CliError;
pub use config::{load_config, ExperimentConfig};
