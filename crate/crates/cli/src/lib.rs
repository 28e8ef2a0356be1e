//! Command-line front end: configuration loading, run manifests and the
//! glue between pipeline stages.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use args::Cli;
pub use error::{CliError, CliResult};

use args::Command;

/// Runs a parsed command line.
pub fn run(mut cli: Cli) -> CliResult<()> {
    commands::resolve_paths(&mut cli);
    match &cli.command {
        Command::Rerun { manifest } => {
            let out = cli
                .global
                .out
                .clone()
                .ok_or_else(|| CliError::Config("--out is required".into()))?;
            commands::rerun(manifest, &out).map(|_| ())
        }
        _ => commands::execute(&cli).map(|_| ()),
    }
}
