//! Experiment pipeline behind the `coheragg` binary.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod synthetic;

pub use config::ExperimentConfig;
pub use error::CliError;
