//! Command-line companion to `comet-core`: run configuration, dataset and
//! checkpoint file formats, metric reports, and the verb implementations
//! behind the `comet` binary.

pub mod checkpoint_io;
pub mod commands;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod metrics;
pub mod report;

pub use error::{CliError, Result};
