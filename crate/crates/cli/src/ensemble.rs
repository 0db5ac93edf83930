use std::path::PathBuf;

use boostnmt_core::corpus::{detokenize, write_lines};
use boostnmt_core::eval::{evaluate_ensemble, BleuReport, EnsembleConfig};
use boostnmt_core::model::Averaging;
use clap::Args;

use crate::error::{CliError, CliResult};
use crate::prepared::Prepared;

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Checkpoint files; their output distributions are averaged.
    #[arg(required = true)]
    checkpoints: Vec<PathBuf>,
    /// Prepared corpus directory.
    #[arg(long)]
    data: PathBuf,
    /// Split to translate.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = boostnmt_core::corpus::DEFAULT_MAX_LEN)]
    max_out_len: usize,
    /// linear or loglinear.
    #[arg(long, default_value = "linear")]
    averaging: String,
    /// Where to write one detokenized hypothesis per line.
    #[arg(long)]
    hyp_out: PathBuf,
    /// Also write the report as a CSV row.
    #[arg(long)]
    report_csv: Option<PathBuf>,
}

pub fn run(args: EnsembleArgs) -> CliResult<()> {
    let averaging: Averaging = args.averaging.parse().map_err(CliError::Usage)?;
    if args.beam == 0 {
        return Err(CliError::Usage("--beam must be >= 1".into()));
    }
    let prepared = Prepared::load(&args.data)?;
    let corpus = prepared.split(&args.split)?;
    let config = EnsembleConfig {
        checkpoints: args.checkpoints.clone(),
        beam_width: args.beam,
        max_out_len: args.max_out_len,
        averaging,
    };
    let (report, hyps) = evaluate_ensemble(&config, corpus)?;
    write_lines(&args.hyp_out, hyps.iter().map(|h| detokenize(h)))?;
    if let Some(p) = &args.report_csv {
        let mut w = csv::Writer::from_path(p)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
        let mut header = vec!["members".to_owned()];
        header.extend(BleuReport::CSV_HEADER.iter().map(|s| s.to_string()));
        let mut row = vec![args.checkpoints.len().to_string()];
        row.extend(report.csv_row());
        w.write_record(&header)
            .and_then(|_| w.write_record(&row))
            .map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
        w.flush()
            .map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
    }
    println!("members = {}", args.checkpoints.len());
    print!("{}", report.to_text());
    Ok(())
}
