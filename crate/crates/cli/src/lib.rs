//! Command-line front end of the toolkit: configuration, the synthetic
//! benchmark generator and the `eval`, `tune`, `gstar`, `oracle` and `synth`
//! subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod synth;

pub use commands::{run, Command};
pub use config::{Flags, RunConfig, Settings};
pub use error::CliError;
