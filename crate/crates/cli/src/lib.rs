//! Command-line driver for `tubeplan`: sample generation, tube learning,
//! planning, Monte Carlo validation, benchmarks and a cached pipeline.

pub mod benchmark;
pub mod commands;
pub mod config;
pub mod error;
pub mod files;
pub mod pipeline;
pub mod run;

pub use error::{CliError, CliResult, ExitStatus};
