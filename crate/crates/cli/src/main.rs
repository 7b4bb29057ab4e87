use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = safeclick_cli::cli::Cli::parse();
    match safeclick_cli::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
