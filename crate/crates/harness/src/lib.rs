//! Configuration, data ingestion, task-stream generation and experiment
//! orchestration for the `hybridfit` command-line tool.

pub mod config;
pub mod data;
mod error;
pub mod report;
pub mod run;
pub mod streams;

pub use config::{DataSource, ExperimentConfig};
pub use error::{HarnessError, Result};
pub use run::{emulate, fit_direct, gen_data, run_experiment, RunArtifacts};
