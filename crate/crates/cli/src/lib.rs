//! Command-line driver: configuration, artifact layout and the subcommands.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;

pub use cli::{run, Cli};
pub use config::ExperimentConfig;
pub use error::CliError;
