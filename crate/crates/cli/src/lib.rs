//! Command-line front end: configuration, subcommands and the experiment
//! drivers shared with the acceptance suite.

pub mod commands;
pub mod config;
pub mod experiment;

pub use config::{ConfigError, ExperimentConfig, ExtractorChoice};
