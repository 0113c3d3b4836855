//! Run configuration, dataset files and the command implementations.

pub mod config;
pub mod commands;
pub mod dataset;

pub use config::{RunConfig, RunMode};
pub use dataset::{Dataset, DatasetHeader, DatasetRole};
