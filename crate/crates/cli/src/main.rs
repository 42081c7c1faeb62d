use std::process::ExitCode;

use clap::Parser;
use tubeplan_cli::run::{execute, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let status = match execute(&cli) {
        Ok(status) => status,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_status()
        }
    };
    ExitCode::from(status.code())
}
