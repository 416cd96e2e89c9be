//! Command-line front end: run configuration, dataset files and the
//! generate / train / evaluate / ablate pipeline.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod pipeline;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
