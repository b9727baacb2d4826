use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    omr_cli::run(omr_cli::Cli::parse())
}
