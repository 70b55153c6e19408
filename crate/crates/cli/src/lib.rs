//! File formats, configuration and the command-line front end.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod embeddings;
mod error;
pub mod gradcheck_config;
pub mod pipeline;
pub mod report;

pub use cli::main_with_args;
pub use error::CliError;
