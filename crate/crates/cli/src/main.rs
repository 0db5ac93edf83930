use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod ensemble;
mod error;
mod manifest;
mod plot;
mod prepare;
mod prepared;
mod report;
mod train;

use error::CliResult;

/// Perplexity-driven data selection experiments for a small attention
/// encoder-decoder.
#[derive(Debug, Parser)]
#[command(name = "boostnmt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter a bitext, build vocabularies and write corpus statistics.
    Prepare(prepare::PrepareArgs),
    /// Write a synthetic bitext for desk-scale experiments.
    Synth(prepare::SynthArgs),
    /// Train one policy for every configured seed.
    Train(Box<train::TrainArgs>),
    /// Merge metrics logs into a table and learning-curve plots.
    Report(report::ReportArgs),
    /// Score one or more checkpoints (averaged) with BLEU.
    Ensemble(ensemble::EnsembleArgs),
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Prepare(a) => prepare::run(a),
        Command::Synth(a) => prepare::run_synth(a),
        Command::Train(a) => train::run(*a),
        Command::Report(a) => report::run(a),
        Command::Ensemble(a) => ensemble::run(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
