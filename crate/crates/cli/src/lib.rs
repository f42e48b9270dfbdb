//! Command implementations behind the `dept` binary.

pub mod config;
pub mod costs;
pub mod error;
pub mod evaluate;
pub mod prepare;
pub mod synth;
pub mod train;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
