//! Experiment driver: configuration, artifact layout, evaluation suites and
//! the consolidated report.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod store;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use pipeline::{Lab, Suite};
