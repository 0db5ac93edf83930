//! Per-unit loss bookkeeping and perplexity-style difficulty scores.
//!
//! The training loop already computes every unit's NLL; recording it here
//! costs no extra forward pass.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use crate::corpus::UnitId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormalizationMode {
    /// `exp(nll / member_count)`
    ByBatchSize,
    /// `exp(nll / target_tokens)`
    ByTargetLength,
    /// Raw NLL.
    None,
}

impl NormalizationMode {
    pub fn name(self) -> &'static str {
        match self {
            NormalizationMode::ByBatchSize => "batch",
            NormalizationMode::ByTargetLength => "length",
            NormalizationMode::None => "none",
        }
    }
}

impl std::str::FromStr for NormalizationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "batch" => Ok(NormalizationMode::ByBatchSize),
            "length" => Ok(NormalizationMode::ByTargetLength),
            "none" => Ok(NormalizationMode::None),
            other => Err(format!(
                "unknown normalization `{other}` (expected batch, length or none)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Granularity {
    #[default]
    Sentence,
    Batch,
}

impl Granularity {
    pub fn name(self) -> &'static str {
        match self {
            Granularity::Sentence => "sentence",
            Granularity::Batch => "batch",
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sentence" => Ok(Granularity::Sentence),
            "batch" => Ok(Granularity::Batch),
            other => Err(format!(
                "unknown granularity `{other}` (expected sentence or batch)"
            )),
        }
    }
}

/// Ledger key. Sentence units use the sentence id; batch units pack the
/// epoch and the batch position.
pub type LedgerKey = u64;

pub fn batch_key(epoch: usize, batch_index: usize) -> LedgerKey {
    ((epoch as u64) << 32) | batch_index as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub nll: f64,
    pub target_tokens: usize,
    /// Sentences covered by the unit (a single id at sentence granularity).
    pub members: Vec<UnitId>,
    pub epoch: usize,
}

impl UnitRecord {
    pub fn score(&self, mode: NormalizationMode) -> f64 {
        match mode {
            NormalizationMode::ByTargetLength => (self.nll / self.target_tokens as f64).exp(),
            NormalizationMode::ByBatchSize => (self.nll / self.members.len() as f64).exp(),
            NormalizationMode::None => self.nll,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DifficultyLedger {
    granularity: Granularity,
    records: BTreeMap<LedgerKey, UnitRecord>,
    /// Batch granularity: the latest batch each sentence was trained in.
    last_batch: HashMap<UnitId, LedgerKey>,
}

impl DifficultyLedger {
    pub fn new(granularity: Granularity) -> Self {
        DifficultyLedger {
            granularity,
            ..Default::default()
        }
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Stores a record, superseding any earlier one for the unit. Records
    /// from an older epoch than the stored one are ignored.
    pub fn record(
        &mut self,
        key: LedgerKey,
        nll: f64,
        target_tokens: usize,
        members: Vec<UnitId>,
        epoch: usize,
    ) -> Result<()> {
        if !nll.is_finite() || nll < 0.0 {
            return Err(Error::InvalidNll(nll));
        }
        if target_tokens == 0 || members.is_empty() {
            return Err(Error::Config(
                "a difficulty record needs at least one target token and one member".into(),
            ));
        }
        if let Some(old) = self.records.get(&key) {
            if old.epoch > epoch {
                return Ok(());
            }
        }
        if self.granularity == Granularity::Batch {
            for &m in &members {
                self.last_batch.insert(m, key);
            }
        }
        self.records.insert(
            key,
            UnitRecord {
                nll,
                target_tokens,
                members,
                epoch,
            },
        );
        Ok(())
    }

    pub fn get(&self, key: LedgerKey) -> Option<&UnitRecord> {
        self.records.get(&key)
    }

    /// Difficulty of a unit, `None` when it was never scored.
    pub fn score(&self, key: LedgerKey, mode: NormalizationMode) -> Option<f64> {
        self.records.get(&key).map(|r| r.score(mode))
    }

    /// Difficulty attributed to a sentence. At batch granularity a sentence
    /// inherits the score of the latest batch it was trained in.
    pub fn sentence_score(&self, id: UnitId, mode: NormalizationMode) -> Option<f64> {
        match self.granularity {
            Granularity::Sentence => self.score(id as LedgerKey, mode),
            Granularity::Batch => self.last_batch.get(&id).and_then(|k| self.score(*k, mode)),
        }
    }

    /// Keys whose current record was written in `epoch`.
    pub fn units_in_epoch(&self, epoch: usize) -> Vec<LedgerKey> {
        self.records
            .iter()
            .filter(|(_, r)| r.epoch == epoch)
            .map(|(k, _)| *k)
            .collect()
    }

    /// Writes `unit_id,epoch,nll,length,score_mode,score`, ordered by key.
    pub fn write_csv<W: Write>(&self, out: W, mode: NormalizationMode) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["unit_id", "epoch", "nll", "length", "score_mode", "score"])?;
        for (k, r) in &self.records {
            w.write_record([
                k.to_string(),
                r.epoch.to_string(),
                format!("{:.6}", r.nll),
                r.target_tokens.to_string(),
                mode.name().to_string(),
                format!("{:.6}", r.score(mode)),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}
