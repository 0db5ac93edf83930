use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;

use crate::error::{CliError, CliResult};
use crate::plot::{line_chart, Series};

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories, seed directories or metrics CSV files.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Output directory for report.csv and the SVG curves.
    #[arg(long, short)]
    out: PathBuf,
    /// bleu, valid_ppl or train_ppl (default: bleu when every log has it).
    #[arg(long)]
    metric: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub epoch: f64,
    pub data_units: Option<f64>,
    pub train_ppl: Option<f64>,
    pub valid_ppl: Option<f64>,
    pub lr: Option<f64>,
    pub bleu: Option<f64>,
}

impl Row {
    fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "bleu" => self.bleu,
            "valid_ppl" => self.valid_ppl,
            "train_ppl" => self.train_ppl,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub label: String,
    pub rows: Vec<Row>,
}

/// `metrics.mean.csv` when present, else `metrics.csv`.
fn metrics_file(path: &Path) -> CliResult<PathBuf> {
    if path.is_file() {
        return Ok(path.to_owned());
    }
    for name in ["metrics.mean.csv", "metrics.csv"] {
        let p = path.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(CliError::Usage(format!(
        "no metrics log in {}",
        path.display()
    )))
}

fn read_log(path: &Path) -> CliResult<RunLog> {
    let file = metrics_file(path)?;
    let bad = |msg: String| CliError::Usage(format!("{}: {msg}", file.display()));
    let mut reader = csv::Reader::from_path(&file).map_err(|e| bad(e.to_string()))?;
    let header = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let epoch_col = col("epoch").ok_or_else(|| bad("missing `epoch` column".into()))?;
    let policy_col = col("policy");
    let cols = ["data_units", "train_ppl", "valid_ppl", "lr", "bleu"].map(col);
    let mut label = None;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |c: Option<usize>| -> CliResult<Option<f64>> {
            match c.and_then(|c| rec.get(c)).map(str::trim) {
                None | Some("") => Ok(None),
                Some(v) => v
                    .parse()
                    .map(Some)
                    .map_err(|_| bad(format!("row {}: `{v}` is not a number", i + 2))),
            }
        };
        if label.is_none() {
            label = policy_col.and_then(|c| rec.get(c)).map(str::to_owned);
        }
        rows.push(Row {
            epoch: num(Some(epoch_col))?
                .ok_or_else(|| bad(format!("row {}: empty epoch", i + 2)))?,
            data_units: num(cols[0])?,
            train_ppl: num(cols[1])?,
            valid_ppl: num(cols[2])?,
            lr: num(cols[3])?,
            bleu: num(cols[4])?,
        });
    }
    if rows.is_empty() {
        return Err(bad("no epochs logged".into()));
    }
    let label = label.unwrap_or_else(|| {
        path.file_name().map_or_else(
            || path.display().to_string(),
            |n| n.to_string_lossy().into_owned(),
        )
    });
    Ok(RunLog { label, rows })
}

/// Reads every log; repeated labels get the directory name appended.
pub fn read_logs(paths: &[PathBuf]) -> CliResult<Vec<RunLog>> {
    let mut logs: Vec<RunLog> = paths
        .iter()
        .map(|p| read_log(p))
        .collect::<CliResult<_>>()?;
    let labels: Vec<String> = logs.iter().map(|l| l.label.clone()).collect();
    for (i, log) in logs.iter_mut().enumerate() {
        if labels.iter().filter(|l| **l == labels[i]).count() > 1 {
            let dir = paths[i]
                .file_name()
                .map_or_else(|| i.to_string(), |n| n.to_string_lossy().into_owned());
            log.label = format!("{} ({dir})", log.label);
        }
    }
    Ok(logs)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

pub fn run(args: ReportArgs) -> CliResult<()> {
    let logs = read_logs(&args.runs)?;
    let metric = match args.metric.as_deref() {
        Some(m @ ("bleu" | "valid_ppl" | "train_ppl")) => m.to_owned(),
        Some(other) => {
            return Err(CliError::Usage(format!(
                "unknown metric `{other}` (expected bleu, valid_ppl or train_ppl)"
            )))
        }
        None if logs.iter().all(|l| l.rows.iter().all(|r| r.bleu.is_some())) => "bleu".into(),
        None => "valid_ppl".into(),
    };
    for log in &logs {
        if log.rows.iter().any(|r| r.get(&metric).is_none()) {
            return Err(CliError::Usage(format!(
                "run `{}` has epochs without {metric}",
                log.label
            )));
        }
    }

    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", args.out.display())))?;
    let csv_path = args.out.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", csv_path.display())))?;
    let write_err = |e: csv::Error| CliError::Runtime(format!("{}: {e}", csv_path.display()));
    w.write_record([
        "series",
        "epoch",
        "data_units",
        "train_ppl",
        "valid_ppl",
        "lr",
        "bleu",
    ])
    .map_err(write_err)?;
    for log in &logs {
        for r in &log.rows {
            w.write_record([
                log.label.clone(),
                r.epoch.to_string(),
                fmt_opt(r.data_units),
                fmt_opt(r.train_ppl),
                fmt_opt(r.valid_ppl),
                fmt_opt(r.lr),
                fmt_opt(r.bleu),
            ])
            .map_err(write_err)?;
        }
    }
    w.flush()
        .map_err(|e| CliError::Runtime(format!("{}: {e}", csv_path.display())))?;

    let series: Vec<Series> = logs
        .iter()
        .map(|l| Series {
            label: l.label.clone(),
            points: l
                .rows
                .iter()
                .filter_map(|r| r.get(&metric).map(|v| (r.epoch, v)))
                .collect(),
        })
        .collect();
    let y_label = match metric.as_str() {
        "bleu" => "BLEU",
        "valid_ppl" => "validation perplexity",
        _ => "training perplexity",
    };
    let svg_path = args.out.join(format!("curve_{metric}.svg"));
    let svg = line_chart(&format!("{y_label} by epoch"), "epoch", y_label, &series);
    fs::write(&svg_path, svg)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", svg_path.display())))?;

    for s in &series {
        if let Some(&(e, v)) = s.points.last() {
            println!("{}: epoch {} {metric} {v}", s.label, e);
        }
    }
    println!("wrote {} and {}", csv_path.display(), svg_path.display());
    Ok(())
}
