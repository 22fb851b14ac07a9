//! `intrinsic`: generate synthetic data, train, decompose, evaluate and
//! self-check.
//!
//! Exit codes: 0 success, 1 I/O or runtime failure, 2 usage or configuration
//! error, 3 a `verify` check failed.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// A failed command with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub const RUNTIME: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const VERIFY: u8 = 3;

    pub fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: Self::RUNTIME,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: Self::USAGE,
            message: message.into(),
        }
    }
}

impl From<intrinsic_core::Error> for Failure {
    fn from(e: intrinsic_core::Error) -> Self {
        match e {
            intrinsic_core::Error::Usage(_) => Failure::usage(e.to_string()),
            _ => Failure::runtime(e.to_string()),
        }
    }
}

impl From<intrinsic_nets::Error> for Failure {
    fn from(e: intrinsic_nets::Error) -> Self {
        use intrinsic_nets::Error as E;
        match e {
            E::Usage(_) | E::Config(_) | E::Core(intrinsic_core::Error::Usage(_)) => Failure::usage(e.to_string()),
            _ => Failure::runtime(e.to_string()),
        }
    }
}

pub type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(Failure::USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(Failure::RUNTIME);
        }
    }
    let result = match cli.command {
        Command::Dataset(a) => commands::dataset(a),
        Command::Train(a) => commands::train(a),
        Command::Decompose(a) => commands::decompose(a),
        Command::Eval(a) => commands::eval(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
