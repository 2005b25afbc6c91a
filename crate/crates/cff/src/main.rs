use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match cff::cli::run(cff::cli::Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
