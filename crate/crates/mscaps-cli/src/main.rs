use std::process::ExitCode;

use clap::Parser;

mod args;
mod config;
mod error;
mod formats;
mod parallel;
mod stages;

fn main() -> ExitCode {
    let cli = match args::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests land here too; clap distinguishes
            // them from genuine usage errors by output stream.
            let is_error = e.use_stderr();
            let _ = e.print();
            return if is_error { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match stages::dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mscaps: {e}");
            ExitCode::from(e.code())
        }
    }
}
