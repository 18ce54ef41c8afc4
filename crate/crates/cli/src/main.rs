//! `audit`: command-line front end for the t2i-audit harness.
//!
//! Exit codes: 0 success, 1 fatal error, 2 partial success (some prompts failed).

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// How a command finished when it did not hit a fatal error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Partial,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log_level))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Reliability(a) => commands::reliability(a),
        Command::Diversity(a) => commands::diversity(a),
        Command::Fairness(a) => commands::fairness(a),
        Command::Retrieve(a) => commands::retrieve(a),
        Command::Ontology(a) => commands::ontology(a),
        Command::Compare(a) => commands::compare(a),
        Command::ServeSynthetic(a) => commands::serve_synthetic(a),
    };
    match result {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
