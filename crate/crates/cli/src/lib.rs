//! Batch runner for the vla-lab experiments: layered configs, seeded runs,
//! hashed manifests and pooled reports.

pub mod config;
pub mod error;
pub mod experiments;
pub mod manifest;
pub mod report;
pub mod results;

pub use config::{Experiment, ExperimentConfig};
pub use error::{CliError, Result};
