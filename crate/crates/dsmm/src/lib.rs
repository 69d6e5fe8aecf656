//! Command line, file formats and image IO around `dsmm-core`.
//!
//! The binary is a thin wrapper over [`cli::run`]; every subcommand is also
//! callable as a function for scripting and tests.

pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod fsutil;
pub mod imageio;
pub mod report;

pub use error::{CliError, CliResult};
