use std::process::ExitCode;

use clap::Parser;
use sdum_cli::{error_kind, error_line, run, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let head = msg.split("Usage:").next().unwrap_or_default();
            eprintln!("{}", error_line("usage", head.trim().trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(error_kind(&e), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
