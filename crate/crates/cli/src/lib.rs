//! The `geoind` command-line tool.

pub mod args;
pub mod commands;
pub mod config;

use std::ffi::OsString;

use clap::Parser;

pub use args::Cli;
pub use commands::{Outcome, UsageError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_TRUNCATED: i32 = 3;

/// Runs the tool on `args` (including the program name) and returns the exit code.
pub fn run<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let args = match config::splice(args.into_iter().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let _ = tracing_subscriber::fmt()
        .with_max_level(cli.log)
        .with_writer(std::io::stderr)
        .try_init();
    match commands::dispatch(cli.command) {
        Ok(Outcome::Done) => EXIT_OK,
        Ok(Outcome::Truncated) => EXIT_TRUNCATED,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
