mod args;
mod commands;
mod config;
mod logging;

use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;

use args::Cli;
use commands::Outcome;
use config::RunConfig;

fn run(cli: Cli, log: &logging::LogBuffer) -> Result<Outcome> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cli.command.apply(&mut cfg);
    cfg.resolve()?;
    commands::run(&cfg, log)
}

fn main() -> ExitCode {
    let log = logging::init();
    let cli = Cli::parse();
    match run(cli, &log) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::PartialSweep(n)) => {
            eprintln!("error: {n} sweep cell(s) failed; see sweep.csv");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
