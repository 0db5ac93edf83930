//! Attention encoder-decoder with exact gradients.

pub mod cell;
pub mod checkpoint;
pub mod decode;
pub mod gradcheck;
pub mod network;
pub mod params;
pub mod tensor;

pub use cell::CellKind;
pub use checkpoint::{Checkpoint, VocabRef};
pub use decode::{average_distributions, beam_decode, greedy_decode, Averaging, BeamOptions};
pub use network::{
    backward, decode_step, encode, forward_nll, forward_pass_count, Encoded, ForwardRecord,
};
pub use params::{init_params, sgd_step, Gradients, ModelConfig, ModelParameters, Tensors};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Batch, SentencePair, TokenId, EOS, PAD};
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(cell: CellKind, layers: usize, vocab: usize, hidden: usize) -> ModelConfig {
        ModelConfig {
            embedding_dim: 5,
            hidden_dim: hidden,
            encoder_layers: layers,
            decoder_layers: layers,
            dropout_prob: 0.0,
            source_vocab_size: vocab,
            target_vocab_size: vocab,
            cell,
            init_scale: 0.3,
        }
    }

    fn pair(id: u32, src: &[TokenId], tgt: &[TokenId]) -> SentencePair {
        SentencePair {
            id,
            source: src.to_vec(),
            target: tgt.to_vec(),
        }
    }

    fn random_pair(rng: &mut ChaCha8Rng, id: u32, vocab: usize) -> SentencePair {
        let n = rng.gen_range(1..6);
        let m = rng.gen_range(1..6);
        let tok = |rng: &mut ChaCha8Rng| rng.gen_range(4..vocab as u32);
        SentencePair {
            id,
            source: (0..n).map(|_| tok(rng)).collect(),
            target: (0..m).map(|_| tok(rng)).collect(),
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let mut c = cfg(CellKind::Lstm, 1, 17, 6);
        c.init_scale = 0.0;
        let p = init_params(&c, 0).unwrap();
        let b = Batch::from_pairs(&[&pair(0, &[4, 5, 6], &[7, 8, 9, 10])]);
        let rec = forward_nll(&p, &b, None).unwrap();
        // 4 tokens + EOS
        assert!((rec.sentence_nll[0] - 5.0 * 17f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn batch_total_is_sum_of_singletons() {
        let p = init_params(&cfg(CellKind::Lstm, 2, 12, 6), 5).unwrap();
        let a = pair(0, &[4, 5], &[6, 7, 8]);
        let b = pair(1, &[9, 10, 11, 4, 5], &[6]);
        let both = forward_nll(&p, &Batch::from_pairs(&[&a, &b]), None).unwrap();
        let ra = forward_nll(&p, &Batch::from_pairs(&[&a]), None).unwrap();
        let rb = forward_nll(&p, &Batch::from_pairs(&[&b]), None).unwrap();
        assert!((both.sentence_nll[0] - ra.total_nll).abs() < 1e-12);
        assert!((both.sentence_nll[1] - rb.total_nll).abs() < 1e-12);
        let sum: f64 = both.sentence_nll.iter().sum();
        assert!((both.total_nll - sum).abs() < 1e-12);
    }

    #[test]
    fn padding_columns_are_neutral() {
        let p = init_params(&cfg(CellKind::Gru, 1, 12, 6), 5).unwrap();
        let a = pair(0, &[4, 5], &[6, 7, 8]);
        let b = pair(1, &[9, 10, 11], &[6]);
        let mut batch = Batch::from_pairs(&[&a, &b]);
        let before = forward_nll(&p, &batch, None).unwrap();
        for row in batch.source.iter_mut().chain(batch.target.iter_mut()) {
            row.extend([PAD, PAD, PAD]);
        }
        let after = forward_nll(&p, &batch, None).unwrap();
        for (x, y) in before.sentence_nll.iter().zip(&after.sentence_nll) {
            assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn per_step_terms_and_normalization() {
        let p = init_params(&cfg(CellKind::Lstm, 2, 15, 7), 9).unwrap();
        let a = pair(0, &[4, 5, 13], &[6, 7, 8, 14]);
        let rec = forward_nll(&p, &Batch::from_pairs(&[&a]), None).unwrap();
        assert_eq!(rec.step_nll[0].len(), 5);
        let sum: f64 = rec.step_nll[0].iter().sum();
        assert!((sum - rec.sentence_nll[0]).abs() < 1e-12);
        for t in 0..5 {
            let d = rec.step_distribution(0, t);
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let a = rec.attention(0, t);
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let tgt = [6, 7, 8, 14, EOS];
        for (t, &y) in tgt.iter().enumerate() {
            let expect = -rec.step_distribution(0, t)[y as usize].ln();
            assert!((expect - rec.step_nll[0][t]).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut c = cfg(CellKind::Lstm, 2, 12, 6);
        c.dropout_prob = 0.3;
        let p = init_params(&c, 1).unwrap();
        let b = Batch::from_pairs(&[&pair(0, &[4, 5], &[6, 7])]);
        let x = forward_nll(&p, &b, None).unwrap().total_nll;
        assert_eq!(x, forward_nll(&p, &b, None).unwrap().total_nll);
        let d1 = forward_nll(&p, &b, Some(4)).unwrap().total_nll;
        assert_eq!(d1, forward_nll(&p, &b, Some(4)).unwrap().total_nll);
        assert_ne!(d1, x);
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let p = init_params(&cfg(CellKind::Lstm, 1, 8, 4), 1).unwrap();
        let b = Batch::from_pairs(&[&pair(0, &[4, 50], &[5])]);
        assert!(forward_nll(&p, &b, None).is_err());
    }

    #[test]
    fn gradient_check_lstm_and_gru() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for (i, (cell, layers)) in [
            (CellKind::Lstm, 1),
            (CellKind::Gru, 1),
            (CellKind::Lstm, 2),
            (CellKind::Gru, 2),
        ]
        .into_iter()
        .enumerate()
        {
            let c = cfg(cell, layers, 11, 4);
            let p = init_params(&c, i as u64).unwrap();
            let a = random_pair(&mut rng, 0, 11);
            let b = random_pair(&mut rng, 1, 11);
            let batch = Batch::from_pairs(&[&a, &b]);
            let report = gradcheck::check_gradients(&p, &batch, None, 1e-5, 1e-6).unwrap();
            assert!(
                report.max_relative_error < 1e-4,
                "{cell:?} x{layers}: {}",
                report.max_relative_error
            );
        }
    }

    #[test]
    fn gradient_check_with_dropout_masks() {
        let mut c = cfg(CellKind::Lstm, 2, 9, 4);
        c.dropout_prob = 0.3;
        let p = init_params(&c, 3).unwrap();
        let a = pair(0, &[4, 5, 6], &[7, 8]);
        let batch = Batch::from_pairs(&[&a]);
        let report = gradcheck::check_gradients(&p, &batch, Some(11), 1e-5, 1e-6).unwrap();
        assert!(
            report.max_relative_error < 1e-4,
            "{}",
            report.max_relative_error
        );
    }

    #[test]
    fn unused_embedding_rows_get_zero_gradient() {
        let p = init_params(&cfg(CellKind::Lstm, 1, 12, 5), 2).unwrap();
        let batch = Batch::from_pairs(&[&pair(0, &[4, 5], &[6, 7])]);
        let rec = forward_nll(&p, &batch, None).unwrap();
        let g = backward(&p, &rec).unwrap();
        assert!(g.tensors.src_emb.row(9).iter().all(|&v| v == 0.0));
        assert!(g.tensors.tgt_emb.row(9).iter().all(|&v| v == 0.0));
        assert!(g.tensors.src_emb.row(4).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn duplicating_a_sentence_keeps_mean_gradient() {
        let p = init_params(&cfg(CellKind::Gru, 1, 12, 5), 2).unwrap();
        let a = pair(0, &[4, 5, 8], &[6, 7]);
        let one = forward_nll(&p, &Batch::from_pairs(&[&a]), None).unwrap();
        let two = forward_nll(&p, &Batch::from_pairs(&[&a, &a]), None).unwrap();
        let g1 = backward(&p, &one).unwrap();
        let g2 = backward(&p, &two).unwrap();
        for ((_, x), (_, y)) in g1.tensors.named().iter().zip(g2.tensors.named()) {
            for (u, v) in x.data.iter().zip(&y.data) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stale_record_is_rejected() {
        let mut p = init_params(&cfg(CellKind::Lstm, 1, 12, 5), 2).unwrap();
        let rec = forward_nll(&p, &Batch::from_pairs(&[&pair(0, &[4], &[5])]), None).unwrap();
        let g = backward(&p, &rec).unwrap();
        sgd_step(&mut p, &g, 0.1).unwrap();
        assert!(matches!(backward(&p, &rec), Err(Error::StaleRecord)));
    }

    #[test]
    fn sgd_reduces_loss_on_one_pair() {
        let mut p = init_params(&cfg(CellKind::Lstm, 1, 12, 8), 2).unwrap();
        let batch = Batch::from_pairs(&[&pair(0, &[4, 5, 6], &[7, 8, 9])]);
        let first = forward_nll(&p, &batch, None).unwrap().total_nll;
        for _ in 0..150 {
            let rec = forward_nll(&p, &batch, None).unwrap();
            let g = backward(&p, &rec).unwrap();
            sgd_step(&mut p, &g, 1.0).unwrap();
            assert!(p.is_finite());
        }
        let last = forward_nll(&p, &batch, None).unwrap().total_nll;
        assert!(last < 0.1 * first, "{first} -> {last}");
    }

    /// Decoder that ignores its input and emits 4, 5, 6, EOS with high
    /// probability. Hidden unit k opens on previous token `prevs[k]` and
    /// votes for `next[k]`.
    fn chain_model() -> ModelParameters {
        let h = 4;
        let mut c = cfg(CellKind::Lstm, 1, 8, h);
        c.embedding_dim = 8;
        c.init_scale = 0.0;
        let mut p = init_params(&c, 0).unwrap();
        let t = p.tensors_mut();
        for v in 0..8 {
            t.tgt_emb.row_mut(v)[v] = 1.0;
        }
        let cols = 8 + 2 * h;
        let prevs = [1usize, 4, 5, 6];
        let next = [4usize, 5, 6, 2];
        for k in 0..h {
            t.decoder[0].wx.data[k * cols + prevs[k]] = 8.0; // input gate
            t.decoder[0].wx.data[(2 * h + k) * cols + prevs[k]] = 8.0; // candidate
            t.decoder[0].b.data[3 * h + k] = 8.0; // output gate
            t.out_w.data[next[k] * 3 * h + k] = 20.0;
        }
        p
    }

    #[test]
    fn beam_recovers_forced_chain() {
        let p = chain_model();
        let opts = BeamOptions {
            beam_width: 8,
            max_out_len: 6,
            averaging: Averaging::Linear,
        };
        assert_eq!(beam_decode(&[&p], &[4, 5], &opts).unwrap(), vec![4, 5, 6]);
        assert_eq!(greedy_decode(&p, &[4, 5], 6).unwrap(), vec![4, 5, 6]);
    }

    /// Scores every sequence (no PAD/BOS, ending at EOS or the length cap)
    /// with teacher forcing through `decode_step`, brute force.
    fn brute_force_best(
        p: &ModelParameters,
        src: &[TokenId],
        max_len: usize,
    ) -> (Vec<TokenId>, f64) {
        let enc = encode(p, src).unwrap();
        let v = p.config().target_vocab_size as TokenId;
        let mut best: (Vec<TokenId>, f64) = (Vec::new(), f64::NEG_INFINITY);
        let mut stack: Vec<Vec<TokenId>> = (2..v).map(|t| vec![t]).collect();
        while let Some(seq) = stack.pop() {
            let done = *seq.last().unwrap() == EOS || seq.len() == max_len;
            if !done {
                for t in 2..v {
                    let mut s = seq.clone();
                    s.push(t);
                    stack.push(s);
                }
                continue;
            }
            let mut states = enc.init.clone();
            let mut prev = crate::corpus::BOS;
            let mut lp = 0.0;
            for &t in &seq {
                let (next, dist) = decode_step(p, &enc, &states, prev);
                lp += dist[t as usize].ln();
                states = next;
                prev = t;
            }
            let score = lp / seq.len() as f64;
            if score > best.1 {
                best = (seq, score);
            }
        }
        best
    }

    #[test]
    fn beam_matches_enumeration_on_peaked_model() {
        let p = chain_model();
        let (mut seq, _) = brute_force_best(&p, &[4], 5);
        assert_eq!(seq.pop(), Some(EOS));
        let opts = BeamOptions {
            beam_width: 8,
            max_out_len: 5,
            averaging: Averaging::Linear,
        };
        assert_eq!(beam_decode(&[&p], &[4], &opts).unwrap(), seq);
    }

    #[test]
    fn beam_width_one_is_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..10 {
            let mut c = cfg(CellKind::Lstm, 1, 10, 6);
            c.init_scale = 1.0;
            let p = init_params(&c, seed).unwrap();
            let src = random_pair(&mut rng, 0, 10).source;
            let opts = BeamOptions {
                beam_width: 1,
                max_out_len: 8,
                averaging: Averaging::Linear,
            };
            assert_eq!(
                beam_decode(&[&p], &src, &opts).unwrap(),
                greedy_decode(&p, &src, 8).unwrap()
            );
        }
    }

    #[test]
    fn identical_ensemble_members_decode_identically() {
        let mut c = cfg(CellKind::Gru, 1, 10, 6);
        c.init_scale = 1.0;
        let p = init_params(&c, 3).unwrap();
        let opts = BeamOptions {
            beam_width: 4,
            max_out_len: 8,
            averaging: Averaging::Linear,
        };
        let single = beam_decode(&[&p], &[4, 5, 6], &opts).unwrap();
        for k in [2, 3, 4] {
            let members = vec![&p; k];
            assert_eq!(beam_decode(&members, &[4, 5, 6], &opts).unwrap(), single);
            let log = BeamOptions {
                averaging: Averaging::LogLinear,
                ..opts
            };
            assert_eq!(beam_decode(&members, &[4, 5, 6], &log).unwrap(), single);
        }
    }

    #[test]
    fn averaging_is_exact_for_identical_members() {
        let d = vec![0.1, 0.2, 0.3, 0.4];
        for k in 1..6 {
            let dists = vec![d.clone(); k];
            assert_eq!(average_distributions(&dists, Averaging::Linear), d);
        }
        let avg = average_distributions(&[vec![0.2, 0.8], vec![0.6, 0.4]], Averaging::Linear);
        assert!((avg[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn empty_source_is_rejected() {
        let p = init_params(&cfg(CellKind::Lstm, 1, 10, 4), 0).unwrap();
        assert!(matches!(
            beam_decode(&[&p], &[], &BeamOptions::default()),
            Err(Error::EmptySource)
        ));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_nll() {
        let dir = tempfile::tempdir().unwrap();
        let p = init_params(&cfg(CellKind::Lstm, 2, 12, 5), 8).unwrap();
        let vocab = crate::corpus::build_vocab(
            &crate::corpus::TextCorpus::from_lines(&["a b"], &["c"]).unwrap(),
            crate::corpus::Side::Source,
            10,
        )
        .unwrap();
        let ck = Checkpoint {
            run_id: "r".into(),
            epoch: 3,
            params: p.clone(),
            source_vocab: VocabRef::new("vocab.src", &vocab),
            target_vocab: VocabRef::new("vocab.tgt", &vocab),
        };
        let path = dir.path().join("x.ckpt.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.epoch, 3);
        assert_eq!(back.params, p);
        let batch = Batch::from_pairs(&[&pair(0, &[4, 5, 6], &[7, 8])]);
        assert_eq!(
            forward_nll(&p, &batch, None).unwrap().sentence_nll,
            forward_nll(&back.params, &batch, None)
                .unwrap()
                .sentence_nll
        );
        assert!(back.check_vocabularies(&vocab, &vocab).is_ok());
    }
}
