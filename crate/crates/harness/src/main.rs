use std::process::ExitCode;

use clap::Parser;
use pie_harness::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    pie_harness::logging::init(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
