mod args;
mod commands;
mod inputs;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use mnar_core::Error;

const EXIT_INPUT: u8 = 2;
const EXIT_UNSUPPORTED: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_INTERNAL: u8 = 5;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::UnsupportedPattern(_) => EXIT_UNSUPPORTED,
        Error::RankCollapse { .. } | Error::SingularGram(_) | Error::Decomposition(_) | Error::NonFinite => {
            EXIT_NUMERIC
        }
        _ => EXIT_INPUT,
    }
}

fn configure_threads(threads: Option<usize>) -> Result<(), String> {
    match threads {
        Some(0) => Err("--threads must be at least 1".into()),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string()),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = configure_threads(cli.threads) {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_INPUT);
    }
    let run = std::panic::catch_unwind(|| match &cli.command {
        Command::Complete(a) => commands::complete(a),
        Command::Infer(a) => commands::infer(a),
        Command::Treat(a) => commands::treat(a),
        Command::Simulate(a) => commands::simulate(a),
    });
    match run {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => ExitCode::from(EXIT_INTERNAL),
    }
}
