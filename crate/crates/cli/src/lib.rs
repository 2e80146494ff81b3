//! Experiment orchestration for compositional score-based posterior estimation.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod results;
pub mod sweep;

pub use error::{CliError, CliResult};
