//! Experiment harness for `sdeorder`: TOML configuration, the dataset
//! container, and the runners behind the `sdeorder` binary.

pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod svg;

pub use config::{load_config, ExperimentConfig, ExperimentKind, Method};
pub use error::{CliError, CliResult};
pub use experiment::run_experiment;
