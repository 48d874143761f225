use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match cpm::cli::run(cpm::cli::Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
