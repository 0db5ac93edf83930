use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use boostnmt_core::corpus::{
    build_vocab, detokenize, filter_by_length, load_bitext, write_lines, Side, TextCorpus,
    DEFAULT_MAX_LEN, DEFAULT_VOCAB_CAP,
};
use boostnmt_core::synth::{generate, SynthConfig};
use clap::Args;

use crate::error::{CliError, CliResult};
use crate::prepared::{split_paths, SOURCE_VOCAB, STATS, TARGET_VOCAB, TRAIN_IDS};

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Training bitext.
    #[arg(long, num_args = 2, value_names = ["SRC", "TGT"], required = true)]
    train: Vec<PathBuf>,
    /// Validation bitext.
    #[arg(long, num_args = 2, value_names = ["SRC", "TGT"], required = true)]
    valid: Vec<PathBuf>,
    /// Held-out test bitext.
    #[arg(long, num_args = 2, value_names = ["SRC", "TGT"])]
    test: Option<Vec<PathBuf>>,
    /// Output directory.
    #[arg(long, short)]
    out: PathBuf,
    /// Training pairs with a longer side are dropped.
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    max_len: usize,
    /// Vocabulary size per side, reserved tokens included.
    #[arg(long, default_value_t = DEFAULT_VOCAB_CAP)]
    vocab_cap: usize,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

fn ensure_empty_dir(dir: &Path, force: bool) -> CliResult<()> {
    let non_empty = fs::read_dir(dir).is_ok_and(|mut d| d.next().is_some());
    if non_empty && !force {
        return Err(CliError::Usage(format!(
            "{} is not empty (use --force to overwrite)",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn write_split(dir: &Path, split: &str, corpus: &TextCorpus) -> CliResult<()> {
    let (s, t) = split_paths(dir, split);
    write_lines(&s, corpus.pairs.iter().map(|p| detokenize(&p.source)))?;
    write_lines(&t, corpus.pairs.iter().map(|p| detokenize(&p.target)))?;
    Ok(())
}

fn stats_table(rows: &[(&str, &TextCorpus)], dropped: usize) -> String {
    let mut s = format!(
        "{:<8}{:>12}{:>16}{:>16}\n",
        "split", "sentences", "source_tokens", "target_tokens"
    );
    for (name, c) in rows {
        let (src, tgt) = c.token_counts();
        let _ = writeln!(s, "{name:<8}{:>12}{src:>16}{tgt:>16}", c.len());
    }
    let _ = writeln!(s, "\ntrain pairs dropped by the length filter: {dropped}");
    s
}

pub fn run(args: PrepareArgs) -> CliResult<()> {
    let raw_train = load_bitext(&args.train[0], &args.train[1])?;
    let raw_valid = load_bitext(&args.valid[0], &args.valid[1])?;
    let raw_test = match &args.test {
        Some(p) => Some(load_bitext(&p[0], &p[1])?),
        None => None,
    };
    let train = filter_by_length(&raw_train, args.max_len);
    if train.is_empty() {
        return Err(boostnmt_core::Error::EmptyCorpus.into());
    }
    // held-out splits keep every non-empty pair
    let valid = filter_by_length(&raw_valid, usize::MAX);
    let test = raw_test.as_ref().map(|t| filter_by_length(t, usize::MAX));
    let sv = build_vocab(&train, Side::Source, args.vocab_cap)?;
    let tv = build_vocab(&train, Side::Target, args.vocab_cap)?;

    ensure_empty_dir(&args.out, args.force)?;
    write_split(&args.out, "train", &train)?;
    write_split(&args.out, "valid", &valid)?;
    if let Some(t) = &test {
        write_split(&args.out, "test", t)?;
    }
    write_lines(
        &args.out.join(TRAIN_IDS),
        train.pairs.iter().map(|p| p.id.to_string()),
    )?;
    sv.save(&args.out.join(SOURCE_VOCAB))?;
    tv.save(&args.out.join(TARGET_VOCAB))?;

    let mut rows = vec![("train", &train), ("valid", &valid)];
    if let Some(t) = &test {
        rows.push(("test", t));
    }
    let table = stats_table(&rows, raw_train.len() - train.len());
    let stats = args.out.join(STATS);
    fs::write(&stats, &table)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", stats.display())))?;
    print!("{table}");
    println!(
        "vocabularies: {} source, {} target entries",
        sv.len(),
        tv.len()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for train/valid/test .src/.tgt files.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 3000)]
    pairs: usize,
    /// Pairs in each of the validation and test splits.
    #[arg(long, default_value_t = 200)]
    heldout: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    force: bool,
}

pub fn run_synth(args: SynthArgs) -> CliResult<()> {
    let lines = generate(&SynthConfig {
        pairs: args.pairs + 2 * args.heldout,
        seed: args.seed,
        ..SynthConfig::default()
    });
    ensure_empty_dir(&args.out, args.force)?;
    let bounds = [
        ("train", 0, args.pairs),
        ("valid", args.pairs, args.pairs + args.heldout),
        (
            "test",
            args.pairs + args.heldout,
            args.pairs + 2 * args.heldout,
        ),
    ];
    for (split, a, b) in bounds {
        let (s, t) = split_paths(&args.out, split);
        write_lines(&s, &lines.source[a..b])?;
        write_lines(&t, &lines.target[a..b])?;
    }
    println!(
        "wrote {} train, {} valid and {} test pairs to {}",
        args.pairs,
        args.heldout,
        args.heldout,
        args.out.display()
    );
    Ok(())
}
