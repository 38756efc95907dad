//! `bronchosteer` command-line tool.
//!
//! Exit codes: 0 success, 1 domain error (no plan found, failed validation,
//! replay mismatch, ...), 2 usage or input error. Failures print one JSON
//! line on stderr.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = args::Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.diagnostic());
            ExitCode::from(f.exit_code())
        }
    }
}
