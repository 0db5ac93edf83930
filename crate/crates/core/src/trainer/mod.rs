//! Epoch loop: plan, batch, train, record difficulty, validate, decay,
//! checkpoint, log.

mod config;

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub use config::{Clock, Preset, TrainConfig};

use crate::corpus::{make_batches, Batch, Corpus, UnitId};
use crate::difficulty::{batch_key, DifficultyLedger, Granularity};
use crate::error::{Error, Result};
use crate::eval::score_models;
use crate::model::{
    backward, forward_nll, forward_pass_count, init_params, sgd_step, BeamOptions, Checkpoint,
    ModelParameters, VocabRef,
};
use crate::policy::{SelectionPlan, Selector, PLAN_CSV_HEADER};
use crate::seeding::{derive, Stream};

/// Learning-rate decay: once epoch `decay_start_epoch` is reached or the
/// validation perplexity rises, the rate is multiplied by `decay_factor`
/// after every epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    lr: f64,
    decay_start_epoch: usize,
    decay_factor: f64,
    decaying: bool,
    previous_ppl: Option<f64>,
}

impl LrSchedule {
    pub fn new(initial_lr: f64, decay_start_epoch: usize, decay_factor: f64) -> Self {
        LrSchedule {
            lr: initial_lr,
            decay_start_epoch,
            decay_factor,
            decaying: false,
            previous_ppl: None,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn is_decaying(&self) -> bool {
        self.decaying
    }

    /// Called at the end of `epoch` with its validation perplexity; returns
    /// the rate for the next epoch.
    pub fn step(&mut self, epoch: usize, validation_ppl: f64) -> f64 {
        let rose = self.previous_ppl.is_some_and(|p| validation_ppl > p);
        if epoch >= self.decay_start_epoch || rose {
            self.decaying = true;
        }
        if self.decaying {
            self.lr *= self.decay_factor;
        }
        self.previous_ppl = Some(validation_ppl);
        self.lr
    }
}

/// Teacher-forced perplexity, dropout off: `exp(total NLL / total tokens)`.
pub fn validate(params: &ModelParameters, corpus: &Corpus, batch_size: usize) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (mut nll, mut tokens) = (0.0, 0usize);
    for chunk in corpus.pairs.chunks(batch_size.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        let rec = forward_nll(params, &Batch::from_pairs(&refs), None)?;
        nll += rec.total_nll;
        tokens += rec.total_target_tokens();
    }
    Ok((nll / tokens as f64).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub policy: String,
    /// Run seed, or `mean` for averaged rows.
    pub seed: String,
    pub data_units: f64,
    pub data_fraction: f64,
    pub train_ppl: f64,
    pub valid_ppl: f64,
    /// Rate after this epoch's schedule update.
    pub lr: f64,
    pub bleu: Option<f64>,
    pub seconds: f64,
    /// Forward passes spent on training batches in this epoch.
    pub forward_passes: u64,
    pub batches: usize,
}

pub const METRICS_CSV_HEADER: [&str; 10] = [
    "epoch",
    "policy",
    "seed",
    "data_units",
    "data_fraction",
    "train_ppl",
    "valid_ppl",
    "lr",
    "bleu",
    "seconds",
];

impl EpochMetrics {
    pub fn csv_row(&self) -> [String; 10] {
        let units = if self.data_units.fract() == 0.0 {
            format!("{}", self.data_units as u64)
        } else {
            format!("{:.2}", self.data_units)
        };
        [
            self.epoch.to_string(),
            self.policy.clone(),
            self.seed.clone(),
            units,
            format!("{:.6}", self.data_fraction),
            format!("{:.6}", self.train_ppl),
            format!("{:.6}", self.valid_ppl),
            self.lr.to_string(),
            self.bleu.map_or_else(String::new, |b| format!("{b:.4}")),
            format!("{:.3}", self.seconds),
        ]
    }
}

/// Per-epoch mean over runs, truncated to the shortest run.
pub fn average_metrics(runs: &[Vec<EpochMetrics>]) -> Vec<EpochMetrics> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    let epochs = runs.iter().map(Vec::len).min().unwrap_or(0);
    let k = runs.len() as f64;
    let mean =
        |f: &dyn Fn(&EpochMetrics) -> f64, e: usize| runs.iter().map(|r| f(&r[e])).sum::<f64>() / k;
    (0..epochs)
        .map(|e| {
            let bleu = if runs.iter().all(|r| r[e].bleu.is_some()) {
                Some(mean(&|m| m.bleu.unwrap_or(0.0), e))
            } else {
                None
            };
            EpochMetrics {
                epoch: first[e].epoch,
                policy: first[e].policy.clone(),
                seed: "mean".into(),
                data_units: mean(&|m| m.data_units, e),
                data_fraction: mean(&|m| m.data_fraction, e),
                train_ppl: mean(&|m| m.train_ppl, e),
                valid_ppl: mean(&|m| m.valid_ppl, e),
                lr: mean(&|m| m.lr, e),
                bleu,
                seconds: mean(&|m| m.seconds, e),
                forward_passes: runs.iter().map(|r| r[e].forward_passes).sum(),
                batches: runs.iter().map(|r| r[e].batches).sum(),
            }
        })
        .collect()
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_CSV_HEADER)?;
    for r in rows {
        w.write_record(r.csv_row())?;
    }
    w.flush().map_err(|e| Error::output(path, e))
}

/// Corpora for one training job.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a Corpus,
    pub valid: &'a Corpus,
    /// Scored with BLEU after every epoch when the config enables it.
    pub bleu_corpus: Option<&'a Corpus>,
    /// Recorded in checkpoints.
    pub vocab_paths: Option<(&'a Path, &'a Path)>,
}

impl<'a> TrainData<'a> {
    pub fn new(train: &'a Corpus, valid: &'a Corpus) -> Self {
        TrainData {
            train,
            valid,
            bleu_corpus: None,
            vocab_paths: None,
        }
    }
}

pub type EpochHook<'a> = Box<dyn FnMut(&EpochMetrics) + 'a>;

/// Optional instrumentation of a run.
#[derive(Default)]
pub struct Hooks<'a> {
    /// Replaces the measured validation perplexity of an epoch before the
    /// schedule sees it.
    pub valid_ppl: Option<Box<dyn Fn(usize, f64) -> f64 + 'a>>,
    /// Called after each epoch with its metrics row.
    pub on_epoch: Option<EpochHook<'a>>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub run_id: String,
    pub metrics: Vec<EpochMetrics>,
    pub plans: Vec<SelectionPlan>,
    pub ledger: DifficultyLedger,
    pub params: ModelParameters,
    pub checkpoints: Vec<PathBuf>,
    /// Highest BLEU when scored, otherwise lowest validation perplexity.
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub runs: Vec<RunResult>,
    pub mean: Vec<EpochMetrics>,
}

pub fn run_id(config: &TrainConfig, seed: u64) -> String {
    format!("{}-seed{seed}", config.policy.kind.name())
}

struct RunFiles {
    metrics: csv::Writer<File>,
    metrics_path: PathBuf,
    plans: csv::Writer<File>,
    plans_path: PathBuf,
    checkpoints: PathBuf,
}

impl RunFiles {
    fn create(dir: &Path) -> Result<Self> {
        let checkpoints = dir.join("checkpoints");
        fs::create_dir_all(&checkpoints).map_err(|e| Error::output(&checkpoints, e))?;
        let metrics_path = dir.join("metrics.csv");
        let plans_path = dir.join("plans.csv");
        let mut metrics = csv::Writer::from_path(&metrics_path)?;
        metrics.write_record(METRICS_CSV_HEADER)?;
        metrics
            .flush()
            .map_err(|e| Error::output(&metrics_path, e))?;
        let mut plans = csv::Writer::from_path(&plans_path)?;
        plans.write_record(PLAN_CSV_HEADER)?;
        Ok(RunFiles {
            metrics,
            metrics_path,
            plans,
            plans_path,
            checkpoints,
        })
    }
}

fn record_difficulty(
    ledger: &mut DifficultyLedger,
    epoch: usize,
    batch_index: usize,
    ids: &[UnitId],
    nll: &[f64],
    tokens: &[usize],
) -> Result<()> {
    match ledger.granularity() {
        Granularity::Sentence => {
            for i in 0..ids.len() {
                ledger.record(ids[i] as u64, nll[i], tokens[i], vec![ids[i]], epoch)?;
            }
            Ok(())
        }
        Granularity::Batch => ledger.record(
            batch_key(epoch, batch_index),
            nll.iter().sum(),
            tokens.iter().sum(),
            ids.to_vec(),
            epoch,
        ),
    }
}

/// Trains one seed. With `out_dir`, writes `metrics.csv`, `plans.csv`,
/// `difficulty.csv` and per-epoch checkpoints there.
pub fn train_seed(
    config: &TrainConfig,
    data: TrainData<'_>,
    seed: u64,
    out_dir: Option<&Path>,
    hooks: &mut Hooks<'_>,
) -> Result<RunResult> {
    config.validate()?;
    if data.train.is_empty() || data.valid.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let train = data.train;
    let mut model_cfg = config.model.clone();
    model_cfg.source_vocab_size = train.source_vocab.len();
    model_cfg.target_vocab_size = train.target_vocab.len();
    model_cfg.validate()?;
    let mut params = init_params(&model_cfg, derive(seed, Stream::Init, &[]))?;

    let mut policy = config.policy;
    policy.seed = seed;
    let mut selector = Selector::new(policy, config.normalization)?;
    let mut ledger = DifficultyLedger::new(config.granularity);
    let mut schedule = LrSchedule::new(
        config.initial_lr,
        config.decay_start_epoch,
        config.decay_factor,
    );
    let ids = train.ids();
    let n = ids.len() as f64;
    let id = run_id(config, seed);
    let (src_path, tgt_path) = data
        .vocab_paths
        .map_or((PathBuf::new(), PathBuf::new()), |(s, t)| {
            (s.into(), t.into())
        });
    let vocab_refs = (
        VocabRef::new(src_path, &train.source_vocab),
        VocabRef::new(tgt_path, &train.target_vocab),
    );
    let beam = BeamOptions {
        beam_width: config.beam_width,
        max_out_len: config.max_out_len,
        ..BeamOptions::default()
    };

    let mut files = out_dir.map(RunFiles::create).transpose()?;
    let mut result = RunResult {
        seed,
        run_id: id.clone(),
        metrics: Vec::new(),
        plans: Vec::new(),
        ledger: DifficultyLedger::new(config.granularity),
        params: params.clone(),
        checkpoints: Vec::new(),
        best_epoch: 0,
    };
    let mut best: Option<(f64, usize)> = None;
    let mut since_best = 0;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let lr = schedule.lr();
        let plan = selector.plan(epoch, &ledger, &ids);
        if let Some(f) = files.as_mut() {
            plan.write_rows(&mut f.plans)?;
            f.plans
                .flush()
                .map_err(|e| Error::output(&f.plans_path, e))?;
        }
        let batches = make_batches(
            &plan.ids,
            train,
            config.batch_size,
            derive(seed, Stream::Shuffle, &[epoch as u64]),
        )?;

        let passes_before = forward_pass_count();
        let (mut epoch_nll, mut epoch_tokens) = (0.0, 0usize);
        for (b, batch) in batches.iter().enumerate() {
            let diverged = |detail: String| Error::Diverged {
                epoch,
                batch: b + 1,
                detail,
            };
            let dropout = (model_cfg.dropout_prob > 0.0)
                .then(|| derive(seed, Stream::Dropout, &[epoch as u64, b as u64]));
            let rec = forward_nll(&params, batch, dropout).map_err(|e| match e {
                Error::NonFinite(at) => diverged(format!("non-finite loss at {at}")),
                other => other,
            })?;
            if !rec.total_nll.is_finite() {
                return Err(diverged(format!("batch loss {}", rec.total_nll)));
            }
            record_difficulty(
                &mut ledger,
                epoch,
                b,
                &rec.ids,
                &rec.sentence_nll,
                &rec.target_tokens,
            )?;
            epoch_nll += rec.total_nll;
            epoch_tokens += rec.total_target_tokens();

            let mut grads = backward(&params, &rec)?;
            if let Some(c) = config.clip_norm {
                grads.clip_global_norm(c);
            }
            sgd_step(&mut params, &grads, lr)?;
            if !params.is_finite() {
                return Err(diverged("parameters became non-finite".into()));
            }
        }
        let forward_passes = forward_pass_count() - passes_before;

        let measured = validate(&params, data.valid, config.batch_size)?;
        let valid_ppl = match &hooks.valid_ppl {
            Some(f) => f(epoch, measured),
            None => measured,
        };
        let next_lr = schedule.step(epoch, valid_ppl);

        let bleu = match (config.bleu, data.bleu_corpus) {
            (true, Some(c)) => Some(score_models(&[&params], c, &beam)?.0.bleu),
            _ => None,
        };

        if let Some(f) = files.as_ref() {
            let path = f.checkpoints.join(Checkpoint::file_name(&id, epoch));
            Checkpoint {
                run_id: id.clone(),
                epoch,
                params: params.clone(),
                source_vocab: vocab_refs.0.clone(),
                target_vocab: vocab_refs.1.clone(),
            }
            .save(&path)?;
            result.checkpoints.push(path);
        }

        let row = EpochMetrics {
            epoch,
            policy: config.policy.kind.name().to_owned(),
            seed: seed.to_string(),
            data_units: plan.len() as f64,
            data_fraction: plan.len() as f64 / n,
            train_ppl: (epoch_nll / epoch_tokens as f64).exp(),
            valid_ppl,
            lr: next_lr,
            bleu,
            seconds: match config.clock {
                Clock::Wall => started.elapsed().as_secs_f64(),
                Clock::None => 0.0,
            },
            forward_passes,
            batches: batches.len(),
        };
        if let Some(f) = files.as_mut() {
            f.metrics.write_record(row.csv_row())?;
            f.metrics
                .flush()
                .map_err(|e| Error::output(&f.metrics_path, e))?;
        }
        if let Some(cb) = hooks.on_epoch.as_mut() {
            cb(&row);
        }

        // lower is better, so BLEU is negated
        let key = bleu.map_or(valid_ppl, |b| -b);
        if best.is_none_or(|(k, _)| key < k) {
            best = Some((key, epoch));
            since_best = 0;
        } else {
            since_best += 1;
        }
        result.metrics.push(row);
        result.plans.push(plan);
        if config.early_stop_patience > 0 && since_best >= config.early_stop_patience {
            break;
        }
    }

    if let Some(dir) = out_dir {
        let path = dir.join("difficulty.csv");
        let file = File::create(&path).map_err(|e| Error::output(&path, e))?;
        ledger.write_csv(file, config.normalization)?;
        let best_path = dir.join("best_epoch");
        let best_epoch = best.map_or(0, |b| b.1);
        fs::File::create(&best_path)
            .and_then(|mut f| writeln!(f, "{best_epoch}"))
            .map_err(|e| Error::output(&best_path, e))?;
    }
    result.best_epoch = best.map_or(0, |b| b.1);
    result.ledger = ledger;
    result.params = params;
    Ok(result)
}

/// Trains every configured seed. With `out_dir`, each seed gets
/// `seed-<n>/` and the per-epoch means go to `metrics.mean.csv`.
pub fn train(
    config: &TrainConfig,
    data: TrainData<'_>,
    out_dir: Option<&Path>,
    hooks: &mut Hooks<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let dir = out_dir.map(|d| d.join(format!("seed-{seed}")));
        runs.push(train_seed(config, data, seed, dir.as_deref(), hooks)?);
    }
    let all: Vec<_> = runs.iter().map(|r| r.metrics.clone()).collect();
    let mean = average_metrics(&all);
    if let Some(d) = out_dir {
        write_metrics_csv(&d.join("metrics.mean.csv"), &mean)?;
    }
    Ok(TrainOutcome { runs, mean })
}
