use std::process::ExitCode;

use clap::Parser;
use priming_cli::{dispatch, error_line, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command, &cli.flags) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(cli.command.name(), &e));
            ExitCode::FAILURE
        }
    }
}
