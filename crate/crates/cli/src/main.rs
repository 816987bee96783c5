//! `ulsa`: phantom generation, closed-loop runs, training and timing.

mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;
use ulsa_core::Error;

use crate::args::{Cli, Command};

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidInput(_) | Error::ShapeMismatch { .. } => 2,
        Error::Io { .. } | Error::Format(_) => 3,
        Error::Numeric { .. } => 4,
        Error::Qualification { .. } => 5,
        Error::Frame { source, .. } => exit_code(source),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantom(a) => commands::phantom(&a),
        Command::Run(a) => commands::run(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Train(a) => commands::train(&a),
        Command::Replay(a) => commands::replay(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
