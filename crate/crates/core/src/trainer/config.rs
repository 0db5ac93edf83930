//! Training configuration and its flat `key = value` file format.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::difficulty::{Granularity, NormalizationMode};
use crate::error::{Error, Result};
use crate::model::{CellKind, ModelConfig};
use crate::policy::{PolicyConfig, PolicyKind};

/// Whether the metrics log records wall-clock time. With `None` the
/// `seconds` column is 0 and repeated runs produce identical files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Clock {
    Wall,
    #[default]
    None,
}

impl Clock {
    pub fn name(self) -> &'static str {
        match self {
            Clock::Wall => "wall",
            Clock::None => "none",
        }
    }
}

impl FromStr for Clock {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wall" => Ok(Clock::Wall),
            "none" => Ok(Clock::None),
            other => Err(format!("unknown clock `{other}` (expected wall or none)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(format!("unknown preset `{other}` (expected desk or paper)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub decay_start_epoch: usize,
    pub decay_factor: f64,
    pub seeds: Vec<u64>,
    /// `policy.seed` is replaced by the run seed.
    pub policy: PolicyConfig,
    /// Vocabulary sizes are taken from the corpus at training time.
    pub model: ModelConfig,
    pub normalization: NormalizationMode,
    pub granularity: Granularity,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Stop after this many epochs without a validation improvement; 0
    /// trains the full budget.
    pub early_stop_patience: usize,
    /// Score the evaluation corpus with BLEU after every epoch.
    pub bleu: bool,
    pub beam_width: usize,
    pub max_out_len: usize,
    pub clock: Clock,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::preset(Preset::Desk)
    }
}

const KEYS: &[&str] = &[
    "preset",
    "max_epochs",
    "batch_size",
    "initial_lr",
    "decay_start_epoch",
    "decay_factor",
    "seeds",
    "policy",
    "boost_ratio",
    "reduce_keep",
    "reduce_restart_period",
    "normalization",
    "granularity",
    "embedding_dim",
    "hidden_dim",
    "encoder_layers",
    "decoder_layers",
    "dropout_prob",
    "cell",
    "init_scale",
    "clip_norm",
    "early_stop_patience",
    "bleu",
    "beam_width",
    "max_out_len",
    "clock",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value}: {e}")))
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let (model, clip_norm) = match preset {
            Preset::Desk => (ModelConfig::desk(0, 0), Some(5.0)),
            Preset::Paper => (ModelConfig::paper(0, 0), None),
        };
        TrainConfig {
            max_epochs: 18,
            batch_size: crate::corpus::DEFAULT_BATCH_SIZE,
            initial_lr: 1.0,
            decay_start_epoch: 10,
            decay_factor: 0.5,
            seeds: vec![11, 13],
            policy: PolicyConfig::new(PolicyKind::Default),
            model,
            normalization: NormalizationMode::ByTargetLength,
            granularity: Granularity::Sentence,
            clip_norm,
            early_stop_patience: 0,
            bleu: false,
            beam_width: 5,
            max_out_len: crate::corpus::DEFAULT_MAX_LEN,
            clock: Clock::None,
        }
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "preset" => {
                let fresh = TrainConfig::preset(parse_value(key, v)?);
                self.model = fresh.model;
                self.clip_norm = fresh.clip_norm;
            }
            "max_epochs" => self.max_epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "initial_lr" => self.initial_lr = parse_value(key, v)?,
            "decay_start_epoch" => self.decay_start_epoch = parse_value(key, v)?,
            "decay_factor" => self.decay_factor = parse_value(key, v)?,
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .map(|s| parse_value(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "policy" => self.policy.kind = parse_value(key, v)?,
            "boost_ratio" => self.policy.boost_ratio = parse_value(key, v)?,
            "reduce_keep" => self.policy.reduce_keep = parse_value(key, v)?,
            "reduce_restart_period" => self.policy.reduce_restart_period = parse_value(key, v)?,
            "normalization" => self.normalization = parse_value(key, v)?,
            "granularity" => self.granularity = parse_value(key, v)?,
            "embedding_dim" => self.model.embedding_dim = parse_value(key, v)?,
            "hidden_dim" => self.model.hidden_dim = parse_value(key, v)?,
            "encoder_layers" => self.model.encoder_layers = parse_value(key, v)?,
            "decoder_layers" => self.model.decoder_layers = parse_value(key, v)?,
            "dropout_prob" => self.model.dropout_prob = parse_value(key, v)?,
            "cell" => self.model.cell = parse_value::<CellKind>(key, v)?,
            "init_scale" => self.model.init_scale = parse_value(key, v)?,
            "clip_norm" => {
                self.clip_norm = match v {
                    "none" | "off" => None,
                    _ => Some(parse_value(key, v)?),
                }
            }
            "early_stop_patience" => self.early_stop_patience = parse_value(key, v)?,
            "bleu" => self.bleu = parse_value(key, v)?,
            "beam_width" => self.beam_width = parse_value(key, v)?,
            "max_out_len" => self.max_out_len = parse_value(key, v)?,
            "clock" => self.clock = parse_value(key, v)?,
            other => return Err(Error::UnknownConfigKey(other.to_owned())),
        }
        Ok(())
    }

    /// Applies `(key, value)` pairs in order, except that `preset` is applied
    /// first so it never clobbers explicit fields.
    pub fn apply<'a, I>(&mut self, pairs: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let pairs: Vec<_> = pairs.into_iter().collect();
        for (k, v) in pairs.iter().filter(|(k, _)| *k == "preset") {
            self.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| *k != "preset") {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Parses a config file body. Blank lines and `#` comments are skipped;
    /// a key may appear only once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    n + 1
                ))
            })?;
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(Error::UnknownConfigKey(k.to_owned()));
            }
            if !seen.insert(k) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{k}`",
                    n + 1
                )));
            }
            pairs.push((k, v.trim()));
        }
        let mut cfg = TrainConfig::default();
        cfg.apply(pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every field, one per line, in a fixed order; `parse` reads it back
    /// to an equal config.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let m = &self.model;
        let p = &self.policy;
        let clip = self
            .clip_norm
            .map_or_else(|| "none".to_owned(), |c| c.to_string());
        let fields: [(&str, String); 25] = [
            ("max_epochs", self.max_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("initial_lr", self.initial_lr.to_string()),
            ("decay_start_epoch", self.decay_start_epoch.to_string()),
            ("decay_factor", self.decay_factor.to_string()),
            ("seeds", seeds.join(",")),
            ("policy", p.kind.name().to_owned()),
            ("boost_ratio", p.boost_ratio.to_string()),
            ("reduce_keep", p.reduce_keep.to_string()),
            ("reduce_restart_period", p.reduce_restart_period.to_string()),
            ("normalization", self.normalization.name().to_owned()),
            ("granularity", self.granularity.name().to_owned()),
            ("embedding_dim", m.embedding_dim.to_string()),
            ("hidden_dim", m.hidden_dim.to_string()),
            ("encoder_layers", m.encoder_layers.to_string()),
            ("decoder_layers", m.decoder_layers.to_string()),
            ("dropout_prob", m.dropout_prob.to_string()),
            ("cell", m.cell.name().to_owned()),
            ("init_scale", m.init_scale.to_string()),
            ("clip_norm", clip),
            ("early_stop_patience", self.early_stop_patience.to_string()),
            ("bleu", self.bleu.to_string()),
            ("beam_width", self.beam_width.to_string()),
            ("max_out_len", self.max_out_len.to_string()),
            ("clock", self.clock.name().to_owned()),
        ];
        for (k, v) in fields {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.max_epochs < 1 {
            return bad("max_epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return bad(format!("initial_lr must be > 0, got {}", self.initial_lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad(format!(
                "decay_factor must lie in (0, 1), got {}",
                self.decay_factor
            ));
        }
        if self.decay_start_epoch < 1 {
            return bad("decay_start_epoch must be >= 1".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let distinct: BTreeSet<_> = self.seeds.iter().collect();
        if distinct.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("clip_norm must be > 0, got {c}"));
            }
        }
        if self.beam_width < 1 {
            return bad("beam_width must be >= 1".into());
        }
        if self.max_out_len < 1 {
            return bad("max_out_len must be >= 1".into());
        }
        self.policy.validate()?;
        ModelConfig {
            source_vocab_size: 5,
            target_vocab_size: 5,
            ..self.model.clone()
        }
        .validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.max_epochs, 18);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.initial_lr, 1.0);
        assert_eq!(c.decay_start_epoch, 10);
        assert_eq!(c.decay_factor, 0.5);
        assert_eq!(c.seeds.len(), 2);
        assert_eq!(c.normalization, NormalizationMode::ByTargetLength);
        assert_eq!(c.clip_norm, Some(5.0));
        assert_eq!(TrainConfig::preset(Preset::Paper).clip_norm, None);
        c.validate().unwrap();
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(
            TrainConfig::parse("# nothing\n\n").unwrap(),
            TrainConfig::default()
        );
    }

    #[test]
    fn unknown_key_is_named() {
        match TrainConfig::parse("max_epochs = 3\nlearning_rate = 2\n") {
            Err(Error::UnknownConfigKey(k)) => assert_eq!(k, "learning_rate"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_values() {
        for text in [
            "decay_factor = 1.0",
            "decay_factor = 0",
            "initial_lr = 0",
            "max_epochs = 0",
            "seeds = 1,1",
            "policy = lottery",
            "max_epochs",
            "batch_size = 2\nbatch_size = 3",
        ] {
            assert!(
                matches!(TrainConfig::parse(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn preset_is_applied_before_fields() {
        let c = TrainConfig::parse("hidden_dim = 8\npreset = paper\n").unwrap();
        assert_eq!(c.model.hidden_dim, 8);
        assert_eq!(c.model.encoder_layers, 4);
        assert_eq!(c.clip_norm, None);
    }

    #[test]
    fn fields_parse() {
        let c = TrainConfig::parse(
            "policy = reduce\nseeds = 3, 5,7\nclip_norm = none\nnormalization = none\ngranularity = batch\ncell = gru\n",
        )
        .unwrap();
        assert_eq!(c.policy.kind, PolicyKind::Reduce);
        assert_eq!(c.seeds, vec![3, 5, 7]);
        assert_eq!(c.clip_norm, None);
        assert_eq!(c.normalization, NormalizationMode::None);
        assert_eq!(c.granularity, Granularity::Batch);
        assert_eq!(c.model.cell, CellKind::Gru);
    }

    proptest! {
        #[test]
        fn round_trip(
            epochs in 1usize..40,
            lr in 0.001f64..5.0,
            factor in 0.01f64..0.99,
            kind in 0usize..4,
            ratio in 0.01f64..1.0,
            keep in 0.01f64..1.0,
            seeds in proptest::collection::btree_set(0u64..1000, 1..4),
            clip in proptest::option::of(0.1f64..10.0),
        ) {
            let mut c = TrainConfig::default();
            c.max_epochs = epochs;
            c.initial_lr = lr;
            c.decay_factor = factor;
            c.policy.kind = PolicyKind::ALL[kind];
            c.policy.boost_ratio = ratio;
            c.policy.reduce_keep = keep;
            c.seeds = seeds.into_iter().collect();
            c.clip_norm = clip;
            let back = TrainConfig::parse(&c.to_config_string()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
