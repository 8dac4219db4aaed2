//! Subcommands behind the `bsunet` binary.

pub mod args;
pub mod commands;
pub mod manifest;
pub mod pipeline;
pub mod plot;

use std::fmt;

pub use args::Cli;
pub use commands::run;

/// Why a command failed, which decides the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, configuration or input files (exit code 1).
    User(String),
    /// Failure while running (exit code 2).
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::User(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn user(msg: impl Into<String>) -> Self {
        Failure::User(msg.into())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::User(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<bsunet::Error> for Failure {
    fn from(e: bsunet::Error) -> Self {
        use bsunet::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_)
            | E::Shape(_)
            | E::Domain(_)
            | E::Degenerate(_)
            | E::State(_)
            | E::Format { .. }
            | E::Nifti(_)
            | E::TomlDe(_) => Failure::User(msg),
            E::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => Failure::User(msg),
            E::Csv(ref c) => match c.kind() {
                csv::ErrorKind::Io(io) if io.kind() != std::io::ErrorKind::NotFound => Failure::Runtime(msg),
                _ => Failure::User(msg),
            },
            _ => Failure::Runtime(msg),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        bsunet::Error::from(e).into()
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        bsunet::Error::from(e).into()
    }
}

pub type CliResult<T = ()> = std::result::Result<T, Failure>;
