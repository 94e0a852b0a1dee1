//! `tilscore`: tiling, synthetic cohorts, training, prediction, evaluation,
//! survival analysis and heatmaps from one binary.

mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use crate::config::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(err) = rayon::ThreadPoolBuilder::new().num_threads(cli.workers.max(1)).build_global() {
        eprintln!("error: {err}");
        return ExitCode::from(2);
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
