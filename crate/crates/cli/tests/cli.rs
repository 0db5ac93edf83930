use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn boostnmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boostnmt"))
        .args(args)
        .env_remove("NMTBOOST_OUT_ROOT")
        .output()
        .expect("spawn boostnmt")
}

fn ok(args: &[&str]) -> Output {
    let out = boostnmt(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic bitext of `n` training pairs, prepared.
fn prepared(tmp: &TempDir, name: &str, n: usize, seed: u64) -> PathBuf {
    let raw = tmp.path().join(format!("{name}-raw"));
    let prep = tmp.path().join(name);
    ok(&[
        "synth",
        "--out",
        s(&raw),
        "--pairs",
        &n.to_string(),
        "--heldout",
        "20",
        "--seed",
        &seed.to_string(),
    ]);
    let f = |split: &str, side: &str| raw.join(format!("{split}.{side}"));
    ok(&[
        "prepare",
        "--train",
        s(&f("train", "src")),
        s(&f("train", "tgt")),
        "--valid",
        s(&f("valid", "src")),
        s(&f("valid", "tgt")),
        "--test",
        s(&f("test", "src")),
        s(&f("test", "tgt")),
        "--out",
        s(&prep),
    ]);
    prep
}

const TINY: [&str; 6] = [
    "--set",
    "hidden_dim=4",
    "--set",
    "embedding_dim=4",
    "--batch-size",
    "16",
];

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", s(data), "--out", s(out)];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(extra);
    boostnmt(&args)
}

/// Total copies per epoch in a plan CSV.
fn plan_sizes(path: &Path) -> Vec<usize> {
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    let mut r = csv::Reader::from_path(path).unwrap();
    for rec in r.records() {
        let rec = rec.unwrap();
        let epoch: usize = rec[0].parse().unwrap();
        *sizes.entry(epoch).or_default() += rec[2].parse::<usize>().unwrap();
    }
    sizes.into_values().collect()
}

#[test]
fn prepare_writes_stats_vocab_and_ids() {
    let tmp = TempDir::new().unwrap();
    let prep = prepared(&tmp, "prep", 5000, 1);
    let stats = fs::read_to_string(prep.join("stats.txt")).unwrap();
    let train_line = stats.lines().find(|l| l.starts_with("train")).unwrap();
    assert_eq!(train_line.split_whitespace().nth(1), Some("5000"));
    assert_eq!(
        fs::read_to_string(prep.join("train.ids"))
            .unwrap()
            .lines()
            .count(),
        5000
    );
    let vocab = fs::read_to_string(prep.join("vocab.src")).unwrap();
    assert!(vocab.starts_with("<pad>\n<s>\n</s>\n<unk>\n"));
}

#[test]
fn prepare_missing_file_exits_2_with_path() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nope.src");
    let out = boostnmt(&[
        "prepare",
        "--train",
        s(&missing),
        s(&missing),
        "--valid",
        s(&missing),
        s(&missing),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nope.src"));
}

#[test]
fn unknown_config_key_exits_2_naming_it() {
    let tmp = TempDir::new().unwrap();
    let prep = prepared(&tmp, "prep", 50, 1);
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "max_epochs = 2\nlearning_rate = 0.5\n").unwrap();
    let out = train(&prep, &tmp.path().join("r1"), &["--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning_rate"));

    let out = train(&prep, &tmp.path().join("r2"), &["--set", "warmup=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("warmup"));

    let out = train(&prep, &tmp.path().join("r3"), &["--norm", "median"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn reduce_and_boost_plan_sizes() {
    let tmp = TempDir::new().unwrap();
    let prep = prepared(&tmp, "prep", 100, 2);
    let run = tmp.path().join("reduce");
    let out = train(
        &prep,
        &run,
        &["--policy", "reduce", "--epochs", "6", "--seeds", "5"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(
        plan_sizes(&run.join("seed-5/plans.csv")),
        vec![100, 80, 64, 100, 80, 64]
    );

    let run = tmp.path().join("boost");
    let out = train(
        &prep,
        &run,
        &["--policy", "boost", "--epochs", "3", "--seeds", "5"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(
        plan_sizes(&run.join("seed-5/plans.csv")),
        vec![100, 110, 110]
    );
}

#[test]
fn two_seeds_give_two_runs_and_a_mean() {
    let tmp = TempDir::new().unwrap();
    let prep = prepared(&tmp, "prep", 40, 3);
    let run = tmp.path().join("run");
    let out = train(&prep, &run, &["--epochs", "2", "--seeds", "11,13"]);
    assert!(out.status.success(), "{}", stderr(&out));
    for seed in ["seed-11", "seed-13"] {
        assert!(run.join(seed).join("metrics.csv").is_file());
        let ckpts = fs::read_dir(run.join(seed).join("checkpoints"))
            .unwrap()
            .count();
        assert_eq!(ckpts, 2);
    }
    let mean = fs::read_to_string(run.join("metrics.mean.csv")).unwrap();
    assert_eq!(mean.lines().count(), 3);
    assert!(mean.lines().nth(1).unwrap().contains(",mean,"));
    assert!(!run.join(".lock").exists());
    assert!(run.join("manifest.txt").is_file());
}

#[test]
fn replay_reproduces_logs_byte_for_byte() {
    let tmp = TempDir::new().unwrap();
    let prep = prepared(&tmp, "prep", 60, 4);
    let first = tmp.path().join("first");
    let out = train(
        &prep,
        &first,
        &["--policy", "bootstrap", "--epochs", "3", "--seeds", "7"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let again = tmp.path().join("again");
    ok(&[
        "train",
        "--replay",
        s(&first.join("manifest.txt")),
        "--out",
        s(&again),
    ]);
    for f in ["seed-7/metrics.csv", "seed-7/plans.csv", "metrics.mean.csv"] {
        assert_eq!(
            fs::read(first.join(f)).unwrap(),
            fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn replay_rejects_changed_inputs() {
    let tmp = TempDir::new().unwrap();
    let prep = prepared(&tmp, "prep", 30, 5);
    let first = tmp.path().join("first");
    assert!(train(&prep, &first, &["--epochs", "1", "--seeds", "1"])
        .status
        .success());
    fs::write(prep.join("valid.tgt"), "changed\n").unwrap();
    let out = boostnmt(&[
        "train",
        "--replay",
        s(&first.join("manifest.txt")),
        "--out",
        s(&tmp.path().join("again")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("valid.tgt"));
}

#[test]
fn run_directories_are_never_reused() {
    let tmp = TempDir::new().unwrap();
    let prep = prepared(&tmp, "prep", 30, 6);
    let run = tmp.path().join("run");
    assert!(train(&prep, &run, &["--epochs", "1", "--seeds", "1"])
        .status
        .success());
    let out = train(&prep, &run, &["--epochs", "1", "--seeds", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("already exists"));
}

#[test]
fn out_root_from_environment() {
    let tmp = TempDir::new().unwrap();
    let prep = prepared(&tmp, "prep", 30, 6);
    let root = tmp.path().join("root");
    let mut args = vec!["train", "--data", s(&prep), "--epochs", "1", "--seeds", "1"];
    args.extend_from_slice(&TINY);
    let out = Command::new(env!("CARGO_BIN_EXE_boostnmt"))
        .args(&args)
        .env("NMTBOOST_OUT_ROOT", &root)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let runs: Vec<_> = fs::read_dir(&root).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let name = runs[0].as_ref().unwrap().file_name();
    assert!(name.to_string_lossy().starts_with("default-"));
}

#[test]
fn divergence_exits_1() {
    let tmp = TempDir::new().unwrap();
    let prep = prepared(&tmp, "prep", 30, 8);
    let out = train(
        &prep,
        &tmp.path().join("run"),
        &[
            "--lr",
            "1e300",
            "--set",
            "clip_norm=none",
            "--set",
            "init_scale=1",
            "--seeds",
            "1",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("epoch 1, batch"));
}

fn fixture(policy: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/reference_curves")
        .join(policy)
}

#[test]
fn report_of_reference_curves() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("report");
    let runs: Vec<PathBuf> = ["default", "boost", "reduce", "bootstrap"]
        .iter()
        .map(|p| fixture(p))
        .collect();
    let mut args = vec!["report", "--out", s(&out_dir)];
    args.extend(runs.iter().map(|p| s(p)));
    let out = ok(&args);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("default: epoch 18 bleu 52.49"), "{stdout}");
    assert!(stdout.contains("reduce: epoch 18 bleu 54.12"), "{stdout}");

    let mut r = csv::Reader::from_path(out_dir.join("report.csv")).unwrap();
    let last: BTreeMap<String, (String, String)> = r
        .records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[0].to_owned(), (rec[1].to_owned(), rec[6].to_owned()))
        })
        .collect();
    assert_eq!(last["default"], ("18".into(), "52.49".into()));
    assert_eq!(last["reduce"], ("18".into(), "54.12".into()));
    let svg = fs::read_to_string(out_dir.join("curve_bleu.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 4);
}

#[test]
fn report_single_and_duplicate_series() {
    let tmp = TempDir::new().unwrap();
    let one = tmp.path().join("one");
    ok(&["report", "--out", s(&one), s(&fixture("default"))]);
    let svg = fs::read_to_string(one.join("curve_bleu.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);

    let two = tmp.path().join("two");
    ok(&[
        "report",
        "--out",
        s(&two),
        s(&fixture("boost")),
        s(&fixture("boost")),
    ]);
    let svg = fs::read_to_string(two.join("curve_bleu.svg")).unwrap();
    let lines: Vec<&str> = svg.lines().filter(|l| l.starts_with("<polyline")).collect();
    assert_eq!(lines.len(), 2);
    let points = |l: &str| {
        l.split("points=")
            .nth(1)
            .unwrap()
            .split('>')
            .next()
            .unwrap()
            .to_owned()
    };
    assert_eq!(points(lines[0]), points(lines[1]));
}

#[test]
fn report_without_metrics_exits_2() {
    let tmp = TempDir::new().unwrap();
    let out = boostnmt(&["report", "--out", s(&tmp.path().join("o")), s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no metrics log"));
}

#[test]
fn ensemble_commands() {
    let tmp = TempDir::new().unwrap();
    let prep = prepared(&tmp, "prep", 60, 9);
    let run = tmp.path().join("run");
    assert!(train(&prep, &run, &["--epochs", "2", "--seeds", "1"])
        .status
        .success());
    let ckpt = run.join("seed-1/checkpoints/default-seed1.epoch02.ckpt.json");
    assert!(ckpt.is_file());

    let hyp = |name: &str| tmp.path().join(name);
    let single = ok(&[
        "ensemble",
        "--data",
        s(&prep),
        "--hyp-out",
        s(&hyp("a.txt")),
        s(&ckpt),
    ]);
    ok(&[
        "ensemble",
        "--data",
        s(&prep),
        "--hyp-out",
        s(&hyp("b.txt")),
        s(&ckpt),
    ]);
    let double = ok(&[
        "ensemble",
        "--data",
        s(&prep),
        "--hyp-out",
        s(&hyp("c.txt")),
        s(&ckpt),
        s(&ckpt),
    ]);
    let a = fs::read(hyp("a.txt")).unwrap();
    assert_eq!(a, fs::read(hyp("b.txt")).unwrap());
    assert_eq!(a, fs::read(hyp("c.txt")).unwrap());
    assert_eq!(String::from_utf8_lossy(&a).lines().count(), 20);
    let report = |o: &Output| {
        String::from_utf8_lossy(&o.stdout)
            .lines()
            .skip(1)
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(report(&single), report(&double));
    assert!(report(&single).starts_with("BLEU = "));

    // a corpus with a different vocabulary
    let other = prepared(&tmp, "other", 7, 99);
    let out = boostnmt(&[
        "ensemble",
        "--data",
        s(&other),
        "--hyp-out",
        s(&hyp("d.txt")),
        s(&ckpt),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("vocabulary mismatch"));
}
