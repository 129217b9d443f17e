use std::process::ExitCode;

use clap::Parser;

mod args;
mod commands;
mod tables;

use args::{Cli, Command};

/// Exit status of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Some inputs failed and the rest were processed.
    Partial,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.verbose {
        "info"
    } else {
        "warn"
    }))
    .format_timestamp(None)
    .init();

    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }

    let strict = cli.strict;
    let result = match cli.command {
        Command::Analyze(a) => commands::analyze(a),
        Command::Rank(a) => commands::rank(a),
        Command::Correlate(a) => commands::correlate(a),
        Command::Controls(a) => commands::controls(a),
        Command::Synth(a) => commands::synth(a),
        Command::PlotData(a) => commands::plot_data(a),
    };
    match result {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) if strict => {
            eprintln!("error: partial failure with --strict");
            ExitCode::from(2)
        }
        Ok(Outcome::Partial) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
