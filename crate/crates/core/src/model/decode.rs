//! Beam search over one model or the averaged distribution of several.

use std::cmp::Ordering;

use super::cell::State;
use super::network::{decode_step, encode, Encoded};
use super::params::ModelParameters;
use crate::corpus::{TokenId, BOS, EOS, PAD};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    /// Arithmetic mean of member probabilities.
    #[default]
    Linear,
    /// Renormalized geometric mean.
    LogLinear,
}

impl Averaging {
    pub fn name(self) -> &'static str {
        match self {
            Averaging::Linear => "linear",
            Averaging::LogLinear => "loglinear",
        }
    }
}

impl std::str::FromStr for Averaging {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Averaging::Linear),
            "loglinear" | "log-linear" => Ok(Averaging::LogLinear),
            other => Err(format!(
                "unknown averaging `{other}` (expected linear or loglinear)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamOptions {
    pub beam_width: usize,
    /// Upper bound on emitted tokens, EOS included.
    pub max_out_len: usize,
    pub averaging: Averaging,
}

impl Default for BeamOptions {
    fn default() -> Self {
        BeamOptions {
            beam_width: 5,
            max_out_len: 100,
            averaging: Averaging::Linear,
        }
    }
}

/// Averages member distributions. Written as `p₀ + Σ(pᵢ − p₀)/k` so that
/// identical members reproduce `p₀` bit for bit.
pub fn average_distributions(dists: &[Vec<f64>], averaging: Averaging) -> Vec<f64> {
    let k = dists.len() as f64;
    let first = &dists[0];
    match averaging {
        Averaging::Linear => (0..first.len())
            .map(|v| first[v] + dists[1..].iter().map(|d| d[v] - first[v]).sum::<f64>() / k)
            .collect(),
        Averaging::LogLinear => {
            if dists.len() == 1 {
                return first.clone();
            }
            let logs: Vec<f64> = (0..first.len())
                .map(|v| {
                    let l0 = first[v].ln();
                    l0 + dists[1..].iter().map(|d| d[v].ln() - l0).sum::<f64>() / k
                })
                .collect();
            let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut out: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = out.iter().sum();
            out.iter_mut().for_each(|p| *p /= sum);
            out
        }
    }
}

struct Hypothesis {
    tokens: Vec<TokenId>,
    log_prob: f64,
    /// Recurrent states of each member before consuming the last token.
    states: Vec<Vec<State>>,
}

#[derive(Debug, Clone)]
struct Finished {
    tokens: Vec<TokenId>,
    log_prob: f64,
    step: usize,
}

impl Finished {
    fn score(&self) -> f64 {
        self.log_prob / self.tokens.len() as f64
    }
}

/// Best-first ordering: higher score, then earlier completion, then
/// lexicographically smaller tokens.
fn finished_order(a: &Finished, b: &Finished) -> Ordering {
    b.score()
        .total_cmp(&a.score())
        .then(a.step.cmp(&b.step))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search. Returns the best hypothesis without its trailing EOS.
///
/// PAD and BOS are never emitted.
pub fn beam_decode(
    models: &[&ModelParameters],
    source: &[TokenId],
    opts: &BeamOptions,
) -> Result<Vec<TokenId>> {
    if source.is_empty() {
        return Err(Error::EmptySource);
    }
    if models.is_empty() {
        return Err(Error::Config("ensemble needs at least one model".into()));
    }
    if opts.beam_width == 0 {
        return Err(Error::Config("beam_width must be >= 1".into()));
    }
    let vocab = models[0].config().target_vocab_size;
    if let Some(m) = models
        .iter()
        .find(|m| m.config().target_vocab_size != vocab)
    {
        return Err(Error::VocabMismatch {
            side: "target",
            detail: format!(
                "ensemble members have {} and {} target entries",
                vocab,
                m.config().target_vocab_size
            ),
        });
    }
    let encoded: Vec<Encoded> = models
        .iter()
        .map(|m| encode(m, source))
        .collect::<Result<_>>()?;

    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        states: encoded.iter().map(|e| e.init.clone()).collect(),
    }];
    let mut finished: Vec<Finished> = Vec::new();

    for step in 0..opts.max_out_len.max(1) {
        // (log prob, parent, token, next states of parent)
        let mut candidates: Vec<(f64, usize, TokenId)> = Vec::new();
        let mut next_states = Vec::with_capacity(live.len());
        for (h_idx, hyp) in live.iter().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or(BOS);
            let mut dists = Vec::with_capacity(models.len());
            let mut states = Vec::with_capacity(models.len());
            for ((m, e), s) in models.iter().zip(&encoded).zip(&hyp.states) {
                let (st, dist) = decode_step(m, e, s, prev);
                states.push(st);
                dists.push(dist);
            }
            next_states.push(states);
            let dist = average_distributions(&dists, opts.averaging);
            for (v, p) in dist.iter().enumerate() {
                let v = v as TokenId;
                if v == PAD || v == BOS {
                    continue;
                }
                candidates.push((hyp.log_prob + p.ln(), h_idx, v));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.total_cmp(&a.0).then_with(|| {
                let ta = live[a.1].tokens.iter().chain(std::iter::once(&a.2));
                let tb = live[b.1].tokens.iter().chain(std::iter::once(&b.2));
                ta.cmp(tb)
            })
        });
        candidates.truncate(opts.beam_width);

        let last_step = step + 1 >= opts.max_out_len;
        let mut next_live = Vec::new();
        for (lp, parent, v) in candidates {
            let mut tokens = live[parent].tokens.clone();
            tokens.push(v);
            if v == EOS || last_step {
                finished.push(Finished {
                    tokens,
                    log_prob: lp,
                    step,
                });
            } else {
                next_live.push(Hypothesis {
                    tokens,
                    log_prob: lp,
                    states: next_states[parent].clone(),
                });
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
    }

    finished.sort_by(finished_order);
    let mut best = finished.swap_remove(0).tokens;
    if best.last() == Some(&EOS) {
        best.pop();
    }
    Ok(best)
}

/// Argmax decoding, ties to the smaller token id.
pub fn greedy_decode(
    model: &ModelParameters,
    source: &[TokenId],
    max_out_len: usize,
) -> Result<Vec<TokenId>> {
    let enc = encode(model, source)?;
    let mut states = enc.init.clone();
    let mut prev = BOS;
    let mut out = Vec::new();
    for _ in 0..max_out_len.max(1) {
        let (next, dist) = decode_step(model, &enc, &states, prev);
        let mut best = None::<(usize, f64)>;
        for (v, &p) in dist.iter().enumerate() {
            if v as TokenId == PAD || v as TokenId == BOS {
                continue;
            }
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((v, p));
            }
        }
        let tok = best.unwrap().0 as TokenId;
        if tok == EOS {
            break;
        }
        out.push(tok);
        states = next;
        prev = tok;
    }
    Ok(out)
}
