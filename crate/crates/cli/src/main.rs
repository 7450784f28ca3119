use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match rsrlab::run(rsrlab::Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
