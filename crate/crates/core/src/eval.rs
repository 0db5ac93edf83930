//! Corpus BLEU and checkpoint / ensemble evaluation.

use std::collections::HashMap;
use std::hash::Hash;
use std::path::PathBuf;

use rayon::prelude::*;

use crate::corpus::{Corpus, TokenId};
use crate::error::{Error, Result};
use crate::model::{beam_decode, Averaging, BeamOptions, Checkpoint, ModelParameters};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    /// Corpus BLEU on a 0–100 scale.
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    /// Clipped n-gram matches per order.
    pub matches: [usize; MAX_ORDER],
    /// Hypothesis n-grams per order.
    pub totals: [usize; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hypothesis_length: usize,
    pub reference_length: usize,
}

impl BleuReport {
    /// Combines corpus statistics into the score.
    pub fn from_counts(
        matches: [usize; MAX_ORDER],
        totals: [usize; MAX_ORDER],
        hypothesis_length: usize,
        reference_length: usize,
    ) -> Self {
        let mut precisions = [0.0; MAX_ORDER];
        for n in 0..MAX_ORDER {
            if totals[n] > 0 {
                precisions[n] = matches[n] as f64 / totals[n] as f64;
            }
        }
        let brevity_penalty = if hypothesis_length == 0 {
            0.0
        } else if hypothesis_length < reference_length {
            (1.0 - reference_length as f64 / hypothesis_length as f64).exp()
        } else {
            1.0
        };
        let bleu = if precisions.contains(&0.0) {
            0.0
        } else {
            let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
            brevity_penalty * log_mean.exp() * 100.0
        };
        BleuReport {
            bleu,
            precisions,
            matches,
            totals,
            brevity_penalty,
            hypothesis_length,
            reference_length,
        }
    }

    pub fn to_text(&self) -> String {
        let p: Vec<String> = self
            .precisions
            .iter()
            .map(|p| format!("{:.2}", p * 100.0))
            .collect();
        format!(
            "BLEU = {:.2}\nprecisions (1-4) = {}\nbrevity_penalty = {:.4}\nhypothesis_length = {}\nreference_length = {}\n",
            self.bleu,
            p.join(" / "),
            self.brevity_penalty,
            self.hypothesis_length,
            self.reference_length
        )
    }

    pub const CSV_HEADER: [&'static str; 8] = [
        "bleu",
        "p1",
        "p2",
        "p3",
        "p4",
        "brevity_penalty",
        "hyp_len",
        "ref_len",
    ];

    pub fn csv_row(&self) -> [String; 8] {
        [
            format!("{:.4}", self.bleu),
            format!("{:.6}", self.precisions[0]),
            format!("{:.6}", self.precisions[1]),
            format!("{:.6}", self.precisions[2]),
            format!("{:.6}", self.precisions[3]),
            format!("{:.6}", self.brevity_penalty),
            self.hypothesis_length.to_string(),
            self.reference_length.to_string(),
        ]
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 with clipped counts and a single reference per
/// hypothesis.
pub fn bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch {
            hypotheses: hypotheses.len(),
            references: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    Ok(BleuReport::from_counts(matches, totals, hyp_len, ref_len))
}

/// Beam-decodes every source of `corpus`, in corpus order. The output length
/// of each sentence is capped at `min(max_out_len, 2n + 10)`.
pub fn decode_corpus(
    models: &[&ModelParameters],
    corpus: &Corpus,
    opts: &BeamOptions,
) -> Result<Vec<Vec<TokenId>>> {
    corpus
        .pairs
        .par_iter()
        .map(|p| {
            let cap = opts.max_out_len.min(2 * p.source.len() + 10);
            beam_decode(
                models,
                &p.source,
                &BeamOptions {
                    max_out_len: cap,
                    ..*opts
                },
            )
        })
        .collect()
}

/// Decodes and scores against the corpus' surface references.
pub fn score_models(
    models: &[&ModelParameters],
    corpus: &Corpus,
    opts: &BeamOptions,
) -> Result<(BleuReport, Vec<Vec<String>>)> {
    let decoded = decode_corpus(models, corpus, opts)?;
    let hyps: Vec<Vec<String>> = decoded
        .iter()
        .map(|ids| {
            ids.iter()
                .map(|&id| corpus.target_vocab.token(id).to_owned())
                .collect()
        })
        .collect();
    let refs: Vec<Vec<String>> = corpus.text.pairs.iter().map(|p| p.target.clone()).collect();
    Ok((bleu(&hyps, &refs)?, hyps))
}

pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    test: &Corpus,
    opts: &BeamOptions,
) -> Result<(BleuReport, Vec<Vec<String>>)> {
    checkpoint.check_vocabularies(&test.source_vocab, &test.target_vocab)?;
    score_models(&[&checkpoint.params], test, opts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub checkpoints: Vec<PathBuf>,
    pub beam_width: usize,
    pub max_out_len: usize,
    pub averaging: Averaging,
}

impl EnsembleConfig {
    pub fn new(checkpoints: Vec<PathBuf>) -> Self {
        EnsembleConfig {
            checkpoints,
            beam_width: 5,
            max_out_len: crate::corpus::DEFAULT_MAX_LEN,
            averaging: Averaging::Linear,
        }
    }

    pub fn beam_options(&self) -> BeamOptions {
        BeamOptions {
            beam_width: self.beam_width,
            max_out_len: self.max_out_len,
            averaging: self.averaging,
        }
    }
}

pub fn evaluate_members(
    members: &[Checkpoint],
    test: &Corpus,
    opts: &BeamOptions,
) -> Result<(BleuReport, Vec<Vec<String>>)> {
    if members.is_empty() {
        return Err(Error::Config(
            "an ensemble needs at least one checkpoint".into(),
        ));
    }
    for m in members {
        m.check_vocabularies(&test.source_vocab, &test.target_vocab)?;
    }
    let params: Vec<&ModelParameters> = members.iter().map(|m| &m.params).collect();
    score_models(&params, test, opts)
}

pub fn evaluate_ensemble(
    config: &EnsembleConfig,
    test: &Corpus,
) -> Result<(BleuReport, Vec<Vec<String>>)> {
    let members: Vec<Checkpoint> = config
        .checkpoints
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<Result<_>>()?;
    evaluate_members(&members, test, &config.beam_options())
}
