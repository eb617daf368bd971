//! Command-line driver: corpus generation, training, conversion, streaming,
//! benchmarking and verification.

pub mod commands;
pub mod config;
pub mod raw;

use std::ffi::OsString;
use std::io::ErrorKind;

use clap::Parser;

pub use commands::{Cli, Command};
pub use config::{Precision, RunConfig, SubSeeds};

/// A failed run and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Unknown flag or malformed setting (exit 2).
    Usage(String),
    /// Missing or unreadable input (exit 1).
    Missing(String),
    /// A checked invariant did not hold (exit 3).
    Invariant(String),
    /// Any other error (exit 1).
    Other(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Missing(_) | Failure::Other(_) => 1,
            Failure::Invariant(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Missing(m) | Failure::Invariant(m) | Failure::Other(m) => m,
        }
    }
}

impl From<s2svc::error::Error> for Failure {
    fn from(e: s2svc::error::Error) -> Self {
        use s2svc::error::Error;
        match &e {
            Error::Io(io) if io.kind() == ErrorKind::NotFound => Failure::Missing(e.to_string()),
            Error::InvalidArgument(_) | Error::ClassOutOfRange { .. } => Failure::Usage(e.to_string()),
            _ if e.is_invariant_violation() => Failure::Invariant(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::from(s2svc::error::Error::Io(e))
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn dispatch<I, A>(argv: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.exit_code()
        }
    }
}
