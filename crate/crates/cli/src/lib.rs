//! Front end for the `pevlm` binary: config resolution and the `verify`,
//! `bench`, `trace` and `cost` commands. Every command writes CSV (header
//! row, comma separated) to `--out` or stdout.

use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

pub mod bench;
pub mod config;
pub mod cost;
pub mod trace;
pub mod verify;

pub use config::{Cli, Command, RunConfig, Settings};

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Core(#[from] pevlm::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            _ => exit::FAILURE,
        }
    }
}

/// `--out` file or stdout.
pub fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

/// Runs the configured command, returning the process exit code.
pub fn run(config: &RunConfig) -> Result<i32, CliError> {
    let mut out = open_output(config.out.as_deref())?;
    match config.command {
        Command::Verify => {
            let report = verify::cmd_verify(config)?;
            report.write(&mut out)?;
            out.flush()?;
            Ok(if report.passed() { exit::SUCCESS } else { exit::FAILURE })
        }
        Command::Bench => {
            bench::cmd_bench(config, &mut out)?;
            Ok(exit::SUCCESS)
        }
        Command::Trace => {
            trace::cmd_trace(config, &mut out)?;
            Ok(exit::SUCCESS)
        }
        Command::Cost => {
            cost::cmd_cost(config, &mut out)?;
            Ok(exit::SUCCESS)
        }
    }
}
