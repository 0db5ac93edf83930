use std::fs;
use std::path::{Path, PathBuf};

use boostnmt_core::corpus::text_digest;
use boostnmt_core::trainer::{train, EpochMetrics, Hooks, TrainConfig, TrainData};
use clap::Args;

use crate::error::{CliError, CliResult};
use crate::manifest::{RunLock, RunManifest, MANIFEST};
use crate::prepared::Prepared;

pub const OUT_ROOT_ENV: &str = "NMTBOOST_OUT_ROOT";

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Prepared corpus directory.
    #[arg(long, required_unless_present = "replay")]
    data: Option<PathBuf>,
    /// Run directory (default: <out-root>/<policy>-<digest>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parent of generated run directories.
    #[arg(long, env = OUT_ROOT_ENV, default_value = "runs")]
    out_root: PathBuf,
    /// Re-run the experiment recorded in a manifest.
    #[arg(long, value_name = "MANIFEST")]
    replay: Option<PathBuf>,
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    decay_start: Option<String>,
    #[arg(long)]
    decay_factor: Option<String>,
    /// batch, length or none.
    #[arg(long)]
    norm: Option<String>,
    /// sentence or batch.
    #[arg(long)]
    granularity: Option<String>,
    #[arg(long)]
    boost_ratio: Option<String>,
    #[arg(long)]
    keep: Option<String>,
    #[arg(long)]
    restart_period: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    beam: Option<String>,
    /// Score the test split with BLEU after every epoch.
    #[arg(long)]
    bleu: bool,
    /// Any config key, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl TrainArgs {
    fn overrides(&self) -> CliResult<Vec<(String, String)>> {
        let flags = [
            ("policy", &self.policy),
            ("max_epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("initial_lr", &self.lr),
            ("decay_start_epoch", &self.decay_start),
            ("decay_factor", &self.decay_factor),
            ("normalization", &self.norm),
            ("granularity", &self.granularity),
            ("boost_ratio", &self.boost_ratio),
            ("reduce_keep", &self.keep),
            ("reduce_restart_period", &self.restart_period),
            ("seeds", &self.seeds),
            ("beam_width", &self.beam),
        ];
        let mut out: Vec<(String, String)> = flags
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_owned(), v.clone())))
            .collect();
        if self.bleu {
            out.push(("bleu".into(), "true".into()));
        }
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
            out.push((k.trim().to_owned(), v.trim().to_owned()));
        }
        Ok(out)
    }

    fn config(&self) -> CliResult<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                TrainConfig::parse(&text)?
            }
            None => TrainConfig::default(),
        };
        let o = self.overrides()?;
        cfg.apply(o.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_owned())
}

fn progress(m: &EpochMetrics) {
    let bleu = m.bleu.map_or_else(String::new, |b| format!(" bleu {b:.2}"));
    eprintln!(
        "{} seed {} epoch {:>2}: data {} train_ppl {:.3} valid_ppl {:.3} lr {}{bleu}",
        m.policy, m.seed, m.epoch, m.data_units, m.train_ppl, m.valid_ppl, m.lr
    );
}

pub fn run(args: TrainArgs) -> CliResult<()> {
    let (manifest, out) = match &args.replay {
        Some(path) => {
            if args.config.is_some() || !args.overrides()?.is_empty() || args.data.is_some() {
                return Err(CliError::Usage(
                    "--replay takes the configuration and data from the manifest; drop the other options"
                        .into(),
                ));
            }
            let old = RunManifest::load(path)?;
            old.verify_inputs()?;
            let out = args
                .out
                .clone()
                .unwrap_or_else(|| args.out_root.join(format!("{}-replay", old.run_id)));
            (old, out)
        }
        None => {
            let config = args.config()?;
            let data_dir = absolute(args.data.as_deref().unwrap_or(Path::new(".")));
            let hashes = RunManifest::hash_inputs(&data_dir)?;
            let mut key = config.to_config_string();
            for (f, h) in &hashes {
                key.push_str(&format!("{f}={h}\n"));
            }
            let run_id = format!("{}-{}", config.policy.kind.name(), &text_digest(&key)[..10]);
            let out = args
                .out
                .clone()
                .unwrap_or_else(|| args.out_root.join(&run_id));
            let m = RunManifest {
                run_id,
                version: env!("CARGO_PKG_VERSION").to_owned(),
                data_dir,
                output_dir: PathBuf::new(),
                hashes,
                config,
            };
            (m, out)
        }
    };

    let prepared = Prepared::load(&manifest.data_dir)?;
    let config = manifest.config.clone();
    let bleu_corpus = if config.bleu {
        Some(prepared.split("test")?)
    } else {
        None
    };

    let _lock = RunLock::acquire(&out)?;
    let manifest = RunManifest {
        output_dir: absolute(&out),
        ..manifest
    };
    let manifest_path = out.join(MANIFEST);
    fs::write(&manifest_path, manifest.to_text())
        .map_err(|e| CliError::Runtime(format!("{}: {e}", manifest_path.display())))?;

    let (src_vocab, tgt_vocab) = prepared.vocab_paths();
    let data = TrainData {
        train: &prepared.train,
        valid: &prepared.valid,
        bleu_corpus,
        vocab_paths: Some((&src_vocab, &tgt_vocab)),
    };
    let mut hooks = Hooks {
        on_epoch: Some(Box::new(progress)),
        ..Hooks::default()
    };
    let outcome = train(&config, data, Some(&out), &mut hooks)?;

    println!("run {} -> {}", manifest.run_id, out.display());
    for r in &outcome.runs {
        if let Some(last) = r.metrics.last() {
            println!(
                "  seed {}: {} epochs, final valid_ppl {:.3}, best epoch {}",
                r.seed, last.epoch, last.valid_ppl, r.best_epoch
            );
        }
    }
    if let Some(m) = outcome.mean.last() {
        println!("  mean: valid_ppl {:.3} (metrics.mean.csv)", m.valid_ppl);
    }
    Ok(())
}
