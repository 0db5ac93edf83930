//! Synthetic translation task for desk-scale experiments.
//!
//! Source words `s0..s{L-1}` translate to `t0..t{L-1}`. Easy pairs are short
//! and monotone. Hard pairs are long and start with an operator: `rev`
//! reverses the translated sequence, `dup` emits every translated word twice.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{build_vocab, Corpus, Side, TextCorpus};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub pairs: usize,
    pub lexicon: usize,
    pub easy_fraction: f64,
    /// Inclusive content-word length range of easy pairs.
    pub easy_len: (usize, usize),
    pub hard_len: (usize, usize),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            pairs: 3000,
            lexicon: 20,
            easy_fraction: 0.6,
            easy_len: (2, 4),
            hard_len: (5, 9),
            seed: 2024,
        }
    }
}

/// Source and target lines plus whether each pair is a hard one.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthLines {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub hard: Vec<bool>,
}

pub fn generate(cfg: &SynthConfig) -> SynthLines {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = SynthLines {
        source: Vec::with_capacity(cfg.pairs),
        target: Vec::with_capacity(cfg.pairs),
        hard: Vec::with_capacity(cfg.pairs),
    };
    for _ in 0..cfg.pairs {
        let hard = rng.gen::<f64>() >= cfg.easy_fraction;
        let (lo, hi) = if hard { cfg.hard_len } else { cfg.easy_len };
        let len = rng.gen_range(lo..=hi);
        let words: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.lexicon)).collect();
        let mut src: Vec<String> = words.iter().map(|w| format!("s{w}")).collect();
        let mut tgt: Vec<String> = words.iter().map(|w| format!("t{w}")).collect();
        if hard {
            if rng.gen_bool(0.5) {
                src.insert(0, "rev".into());
                tgt.reverse();
            } else {
                src.insert(0, "dup".into());
                tgt = tgt.into_iter().flat_map(|t| [t.clone(), t]).collect();
            }
        }
        out.source.push(src.join(" "));
        out.target.push(tgt.join(" "));
        out.hard.push(hard);
    }
    out
}

/// Train / validation / test corpora sharing the training vocabularies.
#[derive(Debug, Clone)]
pub struct DeskTask {
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
}

pub fn desk_task(train_pairs: usize, heldout_pairs: usize, seed: u64) -> Result<DeskTask> {
    let all = generate(&SynthConfig {
        pairs: train_pairs + 2 * heldout_pairs,
        seed,
        ..SynthConfig::default()
    });
    let slice = |a: usize, b: usize| TextCorpus::from_lines(&all.source[a..b], &all.target[a..b]);
    let train = slice(0, train_pairs)?;
    let valid = slice(train_pairs, train_pairs + heldout_pairs)?;
    let test = slice(train_pairs + heldout_pairs, train_pairs + 2 * heldout_pairs)?;
    let sv = build_vocab(&train, Side::Source, usize::MAX)?;
    let tv = build_vocab(&train, Side::Target, usize::MAX)?;
    Ok(DeskTask {
        train: Corpus::new(train, sv.clone(), tv.clone()),
        valid: Corpus::new(valid, sv.clone(), tv.clone()),
        test: Corpus::new(test, sv, tv),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operators_apply() {
        let g = generate(&SynthConfig {
            pairs: 500,
            ..SynthConfig::default()
        });
        let mut seen = (false, false, false);
        for i in 0..500 {
            let s: Vec<&str> = g.source[i].split(' ').collect();
            let t: Vec<&str> = g.target[i].split(' ').collect();
            let tr = |w: &str| w.replacen('s', "t", 1);
            match s[0] {
                "rev" => {
                    seen.0 = true;
                    let want: Vec<String> = s[1..].iter().rev().map(|w| tr(w)).collect();
                    assert_eq!(t, want);
                }
                "dup" => {
                    seen.1 = true;
                    assert_eq!(t.len(), 2 * (s.len() - 1));
                }
                _ => {
                    seen.2 = true;
                    assert!(!g.hard[i]);
                    assert_eq!(t, s.iter().map(|w| tr(w)).collect::<Vec<_>>());
                }
            }
        }
        assert_eq!(seen, (true, true, true));
    }

    #[test]
    fn deterministic_and_mixed() {
        let a = generate(&SynthConfig::default());
        assert_eq!(a, generate(&SynthConfig::default()));
        let hard = a.hard.iter().filter(|&&h| h).count() as f64 / a.hard.len() as f64;
        assert!((hard - 0.4).abs() < 0.05, "{hard}");
    }

    #[test]
    fn desk_task_shares_vocab() {
        let t = desk_task(300, 50, 1).unwrap();
        assert_eq!(t.train.len(), 300);
        assert_eq!(t.valid.len(), 50);
        assert_eq!(t.valid.target_vocab, t.train.target_vocab);
    }
}
