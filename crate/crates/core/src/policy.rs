//! Turns the previous epoch's difficulty scores into the next epoch's
//! selection plan.
//!
//! * default: every unit once.
//! * boost: every unit once plus the ⌈rN⌉ hardest units a second time.
//! * reduce: the hardest ⌈k·|A|⌉ of the active set A, which restarts from the
//!   full corpus every `period` epochs (100%, 80%, 64%, 100%, ... for k = 0.8).
//! * bootstrap: N uniform draws with replacement.
//!
//! Boost and reduce select on the ranking only: descending score, ties by
//! ascending id, never-scored units first.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::corpus::{hex, UnitId};
use crate::difficulty::{DifficultyLedger, NormalizationMode};
use crate::error::{Error, Result};
use crate::seeding::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    Default,
    Boost,
    Reduce,
    Bootstrap,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::Default,
        PolicyKind::Boost,
        PolicyKind::Reduce,
        PolicyKind::Bootstrap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Default => "default",
            PolicyKind::Boost => "boost",
            PolicyKind::Reduce => "reduce",
            PolicyKind::Bootstrap => "bootstrap",
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "default" => Ok(PolicyKind::Default),
            "boost" => Ok(PolicyKind::Boost),
            "reduce" => Ok(PolicyKind::Reduce),
            "bootstrap" => Ok(PolicyKind::Bootstrap),
            other => Err(format!(
                "unknown policy `{other}` (expected default, boost, reduce or bootstrap)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub boost_ratio: f64,
    pub reduce_keep: f64,
    pub reduce_restart_period: usize,
    pub seed: u64,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind) -> Self {
        PolicyConfig {
            kind,
            boost_ratio: 0.10,
            reduce_keep: 0.80,
            reduce_restart_period: 3,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.boost_ratio > 0.0 && self.boost_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "boost_ratio must be in (0, 1], got {}",
                self.boost_ratio
            )));
        }
        if !(self.reduce_keep > 0.0 && self.reduce_keep < 1.0) {
            return Err(Error::Config(format!(
                "reduce_keep must be in (0, 1), got {}",
                self.reduce_keep
            )));
        }
        if self.reduce_restart_period < 2 {
            return Err(Error::Config(format!(
                "reduce_restart_period must be >= 2, got {}",
                self.reduce_restart_period
            )));
        }
        Ok(())
    }
}

/// The multiset of units trained in one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionPlan {
    pub epoch: usize,
    pub ids: Vec<UnitId>,
    pub provenance: String,
}

impl SelectionPlan {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn copies(&self) -> BTreeMap<UnitId, usize> {
        let mut out = BTreeMap::new();
        for &id in &self.ids {
            *out.entry(id).or_insert(0) += 1;
        }
        out
    }

    pub fn distinct(&self) -> usize {
        self.copies().len()
    }

    /// Appends `epoch,unit_id,copies` rows (no header).
    pub fn write_rows<W: Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        for (id, n) in self.copies() {
            w.write_record([self.epoch.to_string(), id.to_string(), n.to_string()])?;
        }
        Ok(())
    }
}

pub const PLAN_CSV_HEADER: [&str; 3] = ["epoch", "unit_id", "copies"];

/// ⌈ratio · n⌉, snapping products within rounding noise of an integer so
/// that e.g. 0.8 · 80 yields 64.
pub fn fraction_count(ratio: f64, n: usize) -> usize {
    let x = ratio * n as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// The `k` hardest ids: descending score, ascending id on ties, unscored
/// (`None`) ahead of everything.
pub fn hardest<F>(ids: &[UnitId], k: usize, score: F) -> Vec<UnitId>
where
    F: Fn(UnitId) -> Option<f64>,
{
    let mut ranked: Vec<(f64, UnitId)> = ids
        .iter()
        .map(|&id| (score(id).unwrap_or(f64::INFINITY), id))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    ranked.into_iter().take(k).map(|(_, id)| id).collect()
}

fn inputs_digest(ids: &[UnitId], ledger: Option<(&DifficultyLedger, NormalizationMode)>) -> String {
    let mut h = Sha256::new();
    for &id in ids {
        h.update(id.to_le_bytes());
        if let Some((l, mode)) = ledger {
            let s = l.sentence_score(id, mode).unwrap_or(f64::INFINITY);
            h.update(s.to_bits().to_le_bytes());
        }
    }
    hex(&h.finalize()[..8])
}

pub fn plan_default(ids: &[UnitId], epoch: usize) -> SelectionPlan {
    SelectionPlan {
        epoch,
        ids: ids.to_vec(),
        provenance: format!("default epoch={epoch} inputs={}", inputs_digest(ids, None)),
    }
}

/// Epoch 1 has no scores and trains on the full corpus.
pub fn plan_boost(
    ledger: &DifficultyLedger,
    ids: &[UnitId],
    boost_ratio: f64,
    mode: NormalizationMode,
    epoch: usize,
) -> SelectionPlan {
    if epoch <= 1 {
        let mut plan = plan_default(ids, epoch);
        plan.provenance = format!("boost epoch={epoch} first-epoch full data");
        return plan;
    }
    let k = fraction_count(boost_ratio, ids.len());
    let extra = hardest(ids, k, |id| ledger.sentence_score(id, mode));
    let mut plan = ids.to_vec();
    plan.extend(extra);
    SelectionPlan {
        epoch,
        ids: plan,
        provenance: format!(
            "boost epoch={epoch} ratio={boost_ratio} mode={} inputs={}",
            mode.name(),
            inputs_digest(ids, Some((ledger, mode)))
        ),
    }
}

/// Returns the plan and the new active set (equal to the plan's ids).
pub fn plan_reduce(
    ledger: &DifficultyLedger,
    ids: &[UnitId],
    keep: f64,
    restart_period: usize,
    epoch: usize,
    active: &[UnitId],
    mode: NormalizationMode,
) -> (SelectionPlan, Vec<UnitId>) {
    let restart =
        epoch <= 1 || (epoch - 1).is_multiple_of(restart_period.max(1)) || active.is_empty();
    let mut next: Vec<UnitId> = if restart {
        ids.to_vec()
    } else {
        hardest(active, fraction_count(keep, active.len()), |id| {
            ledger.sentence_score(id, mode)
        })
    };
    next.sort_unstable();
    let provenance = if restart {
        format!("reduce epoch={epoch} restart")
    } else {
        format!(
            "reduce epoch={epoch} keep={keep} mode={} inputs={}",
            mode.name(),
            inputs_digest(active, Some((ledger, mode)))
        )
    };
    (
        SelectionPlan {
            epoch,
            ids: next.clone(),
            provenance,
        },
        next,
    )
}

pub fn plan_bootstrap(ids: &[UnitId], seed: u64, epoch: usize) -> SelectionPlan {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seeding::derive(seed, Stream::Bootstrap, &[epoch as u64]));
    let n = ids.len();
    let draws = (0..n).map(|_| ids[rng.gen_range(0..n)]).collect();
    SelectionPlan {
        epoch,
        ids: draws,
        provenance: format!("bootstrap epoch={epoch} seed={seed}"),
    }
}

/// Stateful planner for one training run (holds the reduce active set).
#[derive(Debug, Clone)]
pub struct Selector {
    config: PolicyConfig,
    mode: NormalizationMode,
    active: Vec<UnitId>,
}

impl Selector {
    pub fn new(config: PolicyConfig, mode: NormalizationMode) -> Result<Self> {
        config.validate()?;
        Ok(Selector {
            config,
            mode,
            active: Vec::new(),
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn active_set(&self) -> &[UnitId] {
        &self.active
    }

    pub fn plan(
        &mut self,
        epoch: usize,
        ledger: &DifficultyLedger,
        ids: &[UnitId],
    ) -> SelectionPlan {
        let c = &self.config;
        match c.kind {
            PolicyKind::Default => plan_default(ids, epoch),
            PolicyKind::Boost => plan_boost(ledger, ids, c.boost_ratio, self.mode, epoch),
            PolicyKind::Reduce => {
                let (plan, active) = plan_reduce(
                    ledger,
                    ids,
                    c.reduce_keep,
                    c.reduce_restart_period,
                    epoch,
                    &self.active,
                    self.mode,
                );
                self.active = active;
                plan
            }
            PolicyKind::Bootstrap => plan_bootstrap(ids, c.seed, epoch),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::difficulty::Granularity;
    use proptest::prelude::*;

    const MODE: NormalizationMode = NormalizationMode::ByTargetLength;

    fn ledger_from(scores: &[(UnitId, f64)]) -> DifficultyLedger {
        let mut l = DifficultyLedger::new(Granularity::Sentence);
        for &(id, nll) in scores {
            l.record(id as u64, nll, 1, vec![id], 1).unwrap();
        }
        l
    }

    fn ids(n: u32) -> Vec<UnitId> {
        (0..n).collect()
    }

    #[test]
    fn default_is_every_id_once() {
        let p = plan_default(&ids(10), 4);
        assert_eq!(p.ids, ids(10));
        assert_eq!(plan_default(&ids(10), 9).copies(), p.copies());
    }

    #[test]
    fn boost_duplicates_the_hardest() {
        let scores: Vec<(UnitId, f64)> = (0..10)
            .map(|i| (i, if i == 7 { 5.0 } else { 1.0 }))
            .collect();
        let l = ledger_from(&scores);
        let p = plan_boost(&l, &ids(10), 0.10, MODE, 2);
        assert_eq!(p.len(), 11);
        let mut want = ids(10);
        want.push(7);
        assert_eq!(p.ids, want);
    }

    #[test]
    fn boost_first_epoch_is_full_data() {
        let p = plan_boost(
            &DifficultyLedger::new(Granularity::Sentence),
            &ids(10),
            0.1,
            MODE,
            1,
        );
        assert_eq!(p.ids, ids(10));
    }

    #[test]
    fn boost_unscored_rank_first_by_id() {
        let l = ledger_from(&[(0, 9.0), (1, 9.0)]);
        let p = plan_boost(&l, &ids(30), 0.1, MODE, 2);
        // 3 extras: unscored ids 2, 3, 4
        assert_eq!(&p.ids[30..], &[2, 3, 4]);
    }

    #[test]
    fn reduce_cycle_sizes() {
        let l = DifficultyLedger::new(Granularity::Sentence);
        let mut active = Vec::new();
        let mut sizes = Vec::new();
        for epoch in 1..=9 {
            let (p, a) = plan_reduce(&l, &ids(100), 0.8, 3, epoch, &active, MODE);
            sizes.push(p.len());
            active = a;
        }
        assert_eq!(sizes, vec![100, 80, 64, 100, 80, 64, 100, 80, 64]);
        let avg: f64 = (100.0 + 80.0 + 64.0) / 300.0;
        assert!((avg - 0.813).abs() < 1e-3);
    }

    #[test]
    fn reduce_keeps_highest_scores() {
        let scores: Vec<(UnitId, f64)> = (0..10).map(|i| (i, ((i * 7) % 10) as f64)).collect();
        // scores: 0:0 1:7 2:4 3:1 4:8 5:5 6:2 7:9 8:6 9:3 -> drop 0 and 3
        let l = ledger_from(&scores);
        let (p, _) = plan_reduce(&l, &ids(10), 0.8, 3, 2, &ids(10), MODE);
        assert_eq!(p.ids, vec![1, 2, 4, 5, 6, 7, 8, 9]);
    }

    #[test]
    fn bootstrap_single_unit() {
        assert_eq!(plan_bootstrap(&[0], 5, 1).ids, vec![0]);
    }

    #[test]
    fn bootstrap_is_seeded() {
        assert_eq!(
            plan_bootstrap(&ids(50), 5, 2),
            plan_bootstrap(&ids(50), 5, 2)
        );
        assert_ne!(
            plan_bootstrap(&ids(50), 5, 2).ids,
            plan_bootstrap(&ids(50), 5, 3).ids
        );
    }

    #[test]
    fn config_validation() {
        let mut c = PolicyConfig::new(PolicyKind::Boost);
        assert!(c.validate().is_ok());
        c.boost_ratio = 0.0;
        assert!(c.validate().is_err());
        let mut c = PolicyConfig::new(PolicyKind::Reduce);
        c.reduce_keep = 1.0;
        assert!(c.validate().is_err());
        let mut c = PolicyConfig::new(PolicyKind::Reduce);
        c.reduce_restart_period = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn fraction_count_snaps() {
        assert_eq!(fraction_count(0.8, 80), 64);
        assert_eq!(fraction_count(0.1, 10), 1);
        assert_eq!(fraction_count(0.1, 12345), 1235);
        assert_eq!(fraction_count(0.1, 11), 2);
        assert_eq!(fraction_count(0.7, 10), 7);
    }

    #[test]
    fn plan_csv_rows() {
        let p = SelectionPlan {
            epoch: 2,
            ids: vec![3, 1, 3],
            provenance: String::new(),
        };
        let mut w = csv::Writer::from_writer(Vec::new());
        p.write_rows(&mut w).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        assert_eq!(text, "2,1,1\n2,3,2\n");
    }

    proptest! {
        #[test]
        fn selection_depends_only_on_ranking(
            raw in proptest::collection::vec(0.0f64..20.0, 1..80),
            factor in 0.01f64..100.0,
        ) {
            let n = raw.len() as u32;
            let scaled: Vec<(UnitId, f64)> = raw.iter().enumerate().map(|(i, &s)| (i as u32, s)).collect();
            let l1 = ledger_from(&scaled);
            // raw-mode scores scale linearly with nll
            let l2 = ledger_from(&scaled.iter().map(|&(i, s)| (i, s * factor)).collect::<Vec<_>>());
            let m = NormalizationMode::None;
            prop_assert_eq!(plan_boost(&l1, &ids(n), 0.1, m, 3).ids, plan_boost(&l2, &ids(n), 0.1, m, 3).ids);
            let (a, _) = plan_reduce(&l1, &ids(n), 0.8, 3, 2, &ids(n), m);
            let (b, _) = plan_reduce(&l2, &ids(n), 0.8, 3, 2, &ids(n), m);
            prop_assert_eq!(a.ids, b.ids);
        }

        #[test]
        fn reduce_is_subset_of_active(raw in proptest::collection::vec(0.0f64..20.0, 2..60)) {
            let n = raw.len() as u32;
            let l = ledger_from(&raw.iter().enumerate().map(|(i, &s)| (i as u32, s)).collect::<Vec<_>>());
            let (p2, a2) = plan_reduce(&l, &ids(n), 0.8, 3, 2, &ids(n), MODE);
            let (p3, _) = plan_reduce(&l, &ids(n), 0.8, 3, 3, &a2, MODE);
            prop_assert!(p3.ids.iter().all(|id| p2.ids.contains(id)));
            prop_assert_eq!(p3.distinct(), p3.len());
        }
    }
}
