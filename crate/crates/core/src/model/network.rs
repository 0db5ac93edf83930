//! Bidirectional recurrent encoder, additive attention, recurrent decoder.
//!
//! Per step `t` the decoder scores every annotation `h_i` with
//! `vᵀ tanh(W_q s_{t-1} + W_k h_i)`, feeds `[emb(y_{t-1}); ctx_t]` to its first
//! layer and predicts `y_t` from `[s_t; ctx_t]`.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cell::{self, CellKind, State, StepCache};
use super::params::{Gradients, ModelConfig, ModelParameters, Tensors};
use super::tensor::{axpy, dot, softmax_in_place};
use crate::corpus::{Batch, TokenId, UnitId, BOS};
use crate::error::{Error, Result};

thread_local! {
    static FORWARD_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Number of `forward_nll` calls made on the current thread.
pub fn forward_pass_count() -> u64 {
    FORWARD_PASSES.with(Cell::get)
}

/// Encoder outputs needed by every decoder step.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub annotations: Vec<Vec<f64>>,
    pub keys: Vec<Vec<f64>>,
    pub init: Vec<State>,
}

#[derive(Debug, Clone)]
struct EncoderCache {
    /// Per layer, per direction, indexed by source position.
    cells: Vec<[Vec<StepCache>; 2]>,
    emb_masks: Vec<Vec<f64>>,
    /// `layer_masks[l]` masks the input of layer `l` (empty for layer 0).
    layer_masks: Vec<Vec<Vec<f64>>>,
    final_concat: Vec<f64>,
}

#[derive(Debug, Clone)]
struct DecoderStepCache {
    prev_token: TokenId,
    query: Vec<f64>,
    scores_pre: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    emb_mask: Vec<f64>,
    layer_masks: Vec<Vec<f64>>,
    cells: Vec<StepCache>,
    output_input: Vec<f64>,
    probs: Vec<f64>,
}

#[derive(Debug, Clone)]
struct SentenceCache {
    source: Vec<TokenId>,
    target: Vec<TokenId>,
    encoder: EncoderCache,
    encoded: Encoded,
    steps: Vec<DecoderStepCache>,
}

/// Result of a teacher-forced forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    pub ids: Vec<UnitId>,
    /// −Σ_t log p(y_t | y_<t, x) per member, in nats.
    pub sentence_nll: Vec<f64>,
    /// Per-member per-step cross-entropy terms.
    pub step_nll: Vec<Vec<f64>>,
    pub target_tokens: Vec<usize>,
    pub total_nll: f64,
    stamp: u64,
    caches: Vec<SentenceCache>,
}

impl ForwardRecord {
    pub fn total_target_tokens(&self) -> usize {
        self.target_tokens.iter().sum()
    }

    /// Output distribution of member `i` at decoder step `t`.
    pub fn step_distribution(&self, i: usize, t: usize) -> &[f64] {
        &self.caches[i].steps[t].probs
    }

    /// Attention weights of member `i` at decoder step `t`.
    pub fn attention(&self, i: usize, t: usize) -> &[f64] {
        &self.caches[i].steps[t].alpha
    }
}

fn dropout_mask(rng: &mut Option<ChaCha8Rng>, p: f64, len: usize) -> Vec<f64> {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            (0..len)
                .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                .collect()
        }
        _ => Vec::new(),
    }
}

fn apply_mask(x: &[f64], mask: &[f64]) -> Vec<f64> {
    if mask.is_empty() {
        x.to_vec()
    } else {
        x.iter().zip(mask).map(|(a, m)| a * m).collect()
    }
}

fn mask_in_place(x: &mut [f64], mask: &[f64]) {
    if !mask.is_empty() {
        x.iter_mut().zip(mask).for_each(|(a, m)| *a *= m);
    }
}

fn encode_cached(
    t: &Tensors,
    cfg: &ModelConfig,
    source: &[TokenId],
    rng: &mut Option<ChaCha8Rng>,
) -> (Encoded, EncoderCache) {
    let n = source.len();
    let hd = cfg.hidden_dim;
    let p = cfg.dropout_prob;
    let emb_masks: Vec<Vec<f64>> = (0..n)
        .map(|_| dropout_mask(rng, p, cfg.embedding_dim))
        .collect();
    let mut inputs: Vec<Vec<f64>> = source
        .iter()
        .zip(&emb_masks)
        .map(|(&tok, m)| apply_mask(t.src_emb.row(tok as usize), m))
        .collect();
    let mut cells = Vec::with_capacity(cfg.encoder_layers);
    let mut layer_masks = Vec::with_capacity(cfg.encoder_layers);
    let mut outputs = Vec::new();
    for (l, dirs) in t.encoder.iter().enumerate() {
        if l > 0 {
            let masks: Vec<Vec<f64>> = (0..n).map(|_| dropout_mask(rng, p, 2 * hd)).collect();
            inputs = outputs
                .iter()
                .zip(&masks)
                .map(|(o, m): (&Vec<f64>, &Vec<f64>)| apply_mask(o, m))
                .collect();
            layer_masks.push(masks);
        } else {
            layer_masks.push(Vec::new());
        }
        let mut fwd_cache = Vec::with_capacity(n);
        let mut fwd_h = Vec::with_capacity(n);
        let mut state = State::zeros(cfg.cell, hd);
        for x in &inputs {
            let (next, c) = cell::step(cfg.cell, &dirs[0], x, &state);
            fwd_h.push(next.h.clone());
            fwd_cache.push(c);
            state = next;
        }
        let mut bwd_cache: Vec<Option<StepCache>> = vec![None; n];
        let mut bwd_h = vec![Vec::new(); n];
        let mut state = State::zeros(cfg.cell, hd);
        for i in (0..n).rev() {
            let (next, c) = cell::step(cfg.cell, &dirs[1], &inputs[i], &state);
            bwd_h[i] = next.h.clone();
            bwd_cache[i] = Some(c);
            state = next;
        }
        outputs = fwd_h
            .into_iter()
            .zip(bwd_h)
            .map(|(mut f, b)| {
                f.extend_from_slice(&b);
                f
            })
            .collect();
        cells.push([
            fwd_cache,
            bwd_cache.into_iter().map(Option::unwrap).collect(),
        ]);
    }
    let mut final_concat = outputs[n - 1][..hd].to_vec();
    final_concat.extend_from_slice(&outputs[0][hd..]);
    let init = t
        .bridge_w
        .iter()
        .zip(&t.bridge_b)
        .map(|(w, b)| {
            let mut h = b.data.clone();
            w.matvec_acc(&final_concat, &mut h);
            h.iter_mut().for_each(|v| *v = v.tanh());
            State {
                h,
                c: match cfg.cell {
                    CellKind::Lstm => vec![0.0; hd],
                    CellKind::Gru => Vec::new(),
                },
            }
        })
        .collect();
    let keys = outputs.iter().map(|a| t.att_key.matvec(a)).collect();
    (
        Encoded {
            annotations: outputs,
            keys,
            init,
        },
        EncoderCache {
            cells,
            emb_masks,
            layer_masks,
            final_concat,
        },
    )
}

fn decoder_step_cached(
    t: &Tensors,
    cfg: &ModelConfig,
    enc: &Encoded,
    states: &[State],
    prev_token: TokenId,
    rng: &mut Option<ChaCha8Rng>,
) -> (Vec<State>, DecoderStepCache, Vec<f64>) {
    let hd = cfg.hidden_dim;
    let p = cfg.dropout_prob;
    let query = states[states.len() - 1].h.clone();
    let q_proj = t.att_query.matvec(&query);
    let mut alpha = Vec::with_capacity(enc.keys.len());
    let mut scores_pre = Vec::with_capacity(enc.keys.len());
    for key in &enc.keys {
        let pre: Vec<f64> = key
            .iter()
            .zip(&q_proj)
            .map(|(k, q)| (k + q).tanh())
            .collect();
        alpha.push(dot(&t.att_v.data, &pre));
        scores_pre.push(pre);
    }
    softmax_in_place(&mut alpha);
    let mut context = vec![0.0; 2 * hd];
    for (a, ann) in alpha.iter().zip(&enc.annotations) {
        axpy(*a, ann, &mut context);
    }

    let emb_mask = dropout_mask(rng, p, cfg.embedding_dim);
    let mut x = apply_mask(t.tgt_emb.row(prev_token as usize), &emb_mask);
    x.extend_from_slice(&context);
    let mut new_states = Vec::with_capacity(states.len());
    let mut cells = Vec::with_capacity(states.len());
    let mut layer_masks = Vec::with_capacity(states.len());
    for (l, (params, prev)) in t.decoder.iter().zip(states).enumerate() {
        if l > 0 {
            let m = dropout_mask(rng, p, hd);
            x = apply_mask(&new_states.last().map(|s: &State| s.h.clone()).unwrap(), &m);
            layer_masks.push(m);
        } else {
            layer_masks.push(Vec::new());
        }
        let (next, c) = cell::step(cfg.cell, params, &x, prev);
        cells.push(c);
        new_states.push(next);
    }
    let mut output_input = new_states[new_states.len() - 1].h.clone();
    output_input.extend_from_slice(&context);
    let mut logits = t.out_b.data.clone();
    t.out_w.matvec_acc(&output_input, &mut logits);
    let raw_logits = logits.clone();
    softmax_in_place(&mut logits);
    let cache = DecoderStepCache {
        prev_token,
        query,
        scores_pre,
        alpha,
        emb_mask,
        layer_masks,
        cells,
        output_input,
        probs: logits,
    };
    (new_states, cache, raw_logits)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn check_ids(ids: &[TokenId], vocab: usize, side: &str) -> Result<()> {
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab) {
        return Err(Error::Config(format!(
            "{side} token id {bad} out of range for vocabulary of {vocab}"
        )));
    }
    Ok(())
}

fn sentence_forward(
    t: &Tensors,
    cfg: &ModelConfig,
    id: UnitId,
    source: &[TokenId],
    target: &[TokenId],
    rng: &mut Option<ChaCha8Rng>,
) -> Result<(f64, Vec<f64>, SentenceCache)> {
    if source.is_empty() {
        return Err(Error::EmptySource);
    }
    check_ids(source, cfg.source_vocab_size, "source")?;
    check_ids(target, cfg.target_vocab_size, "target")?;
    let (encoded, encoder) = encode_cached(t, cfg, source, rng);
    let mut states = encoded.init.clone();
    let mut steps = Vec::with_capacity(target.len());
    let mut step_nll = Vec::with_capacity(target.len());
    let mut prev = BOS;
    for (pos, &y) in target.iter().enumerate() {
        let (next, cache, logits) = decoder_step_cached(t, cfg, &encoded, &states, prev, rng);
        let loss = log_sum_exp(&logits) - logits[y as usize];
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "sentence {id}, decoder step {pos}"
            )));
        }
        step_nll.push(loss.max(0.0));
        steps.push(cache);
        states = next;
        prev = y;
    }
    let nll = step_nll.iter().sum();
    Ok((
        nll,
        step_nll,
        SentenceCache {
            source: source.to_vec(),
            target: target.to_vec(),
            encoder,
            encoded,
            steps,
        },
    ))
}

/// Teacher-forced negative log-likelihood of every batch member.
///
/// Dropout is active only when `dropout_seed` is given; masks are drawn from
/// a generator seeded by it and the member position.
pub fn forward_nll(
    params: &ModelParameters,
    batch: &Batch,
    dropout_seed: Option<u64>,
) -> Result<ForwardRecord> {
    FORWARD_PASSES.with(|c| c.set(c.get() + 1));
    let cfg = params.config();
    let t = params.tensors();
    let mut record = ForwardRecord {
        ids: batch.ids.clone(),
        sentence_nll: Vec::with_capacity(batch.len()),
        step_nll: Vec::with_capacity(batch.len()),
        target_tokens: batch.target_lengths.clone(),
        total_nll: 0.0,
        stamp: params.stamp(),
        caches: Vec::with_capacity(batch.len()),
    };
    for i in 0..batch.len() {
        let mut rng = dropout_seed
            .map(|s| ChaCha8Rng::seed_from_u64(s ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let (nll, steps, cache) = sentence_forward(
            t,
            cfg,
            batch.ids[i],
            batch.source_row(i),
            batch.target_row(i),
            &mut rng,
        )?;
        record.total_nll += nll;
        record.sentence_nll.push(nll);
        record.step_nll.push(steps);
        record.caches.push(cache);
    }
    Ok(record)
}

/// Gradients of the batch loss `total NLL / total target tokens`.
pub fn backward(params: &ModelParameters, record: &ForwardRecord) -> Result<Gradients> {
    if record.stamp != params.stamp() {
        return Err(Error::StaleRecord);
    }
    let cfg = params.config();
    let mut grads = Gradients::zeros(cfg);
    let tokens = record.total_target_tokens();
    if tokens == 0 {
        return Ok(grads);
    }
    let weight = 1.0 / tokens as f64;
    for cache in &record.caches {
        sentence_backward(params.tensors(), cfg, cache, weight, &mut grads.tensors);
    }
    Ok(grads)
}

fn sentence_backward(
    t: &Tensors,
    cfg: &ModelConfig,
    sc: &SentenceCache,
    weight: f64,
    g: &mut Tensors,
) {
    let hd = cfg.hidden_dim;
    let ed = cfg.embedding_dim;
    let layers = cfg.decoder_layers;
    let top = layers - 1;
    let n = sc.source.len();
    let mut dh: Vec<Vec<f64>> = vec![vec![0.0; hd]; layers];
    let mut dc: Vec<Vec<f64>> = match cfg.cell {
        CellKind::Lstm => vec![vec![0.0; hd]; layers],
        CellKind::Gru => vec![Vec::new(); layers],
    };
    let mut d_ann = vec![vec![0.0; 2 * hd]; n];
    let mut d_keys = vec![vec![0.0; cfg.attention_dim()]; n];

    for (step, &y) in sc.steps.iter().zip(&sc.target).rev() {
        let mut dlogits: Vec<f64> = step.probs.iter().map(|p| p * weight).collect();
        dlogits[y as usize] -= weight;
        g.out_w.outer_acc(&dlogits, &step.output_input);
        axpy(1.0, &dlogits, &mut g.out_b.data);
        let mut dout = vec![0.0; 3 * hd];
        t.out_w.matvec_t_acc(&dlogits, &mut dout);
        axpy(1.0, &dout[..hd], &mut dh[top]);
        let mut dctx = dout[hd..].to_vec();

        for l in (0..layers).rev() {
            let (mut dx, dprev) = cell::step_backward(
                cfg.cell,
                &t.decoder[l],
                &mut g.decoder[l],
                &step.cells[l],
                &dh[l],
                &dc[l],
            );
            if l > 0 {
                mask_in_place(&mut dx, &step.layer_masks[l]);
                axpy(1.0, &dx, &mut dh[l - 1]);
            } else {
                let (demb, dctx_in) = dx.split_at_mut(ed);
                mask_in_place(demb, &step.emb_mask);
                axpy(1.0, demb, g.tgt_emb.row_mut(step.prev_token as usize));
                axpy(1.0, dctx_in, &mut dctx);
            }
            dh[l] = dprev.h;
            dc[l] = dprev.c;
        }

        // attention
        let dalpha: Vec<f64> = sc
            .encoded
            .annotations
            .iter()
            .map(|a| dot(&dctx, a))
            .collect();
        for (i, a) in step.alpha.iter().enumerate() {
            axpy(*a, &dctx, &mut d_ann[i]);
        }
        let mean: f64 = step.alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
        let mut dz_sum = vec![0.0; cfg.attention_dim()];
        for i in 0..n {
            let de = step.alpha[i] * (dalpha[i] - mean);
            if de == 0.0 {
                continue;
            }
            let pre = &step.scores_pre[i];
            axpy(de, pre, &mut g.att_v.data);
            for k in 0..pre.len() {
                let dz = de * t.att_v.data[k] * (1.0 - pre[k] * pre[k]);
                d_keys[i][k] += dz;
                dz_sum[k] += dz;
            }
        }
        g.att_query.outer_acc(&dz_sum, &step.query);
        t.att_query.matvec_t_acc(&dz_sum, &mut dh[top]);
    }

    // bridge: decoder initial hidden states
    let mut dfin = vec![0.0; 2 * hd];
    for l in 0..layers {
        let s0 = &sc.encoded.init[l].h;
        let dpre: Vec<f64> = dh[l]
            .iter()
            .zip(s0)
            .map(|(d, s)| d * (1.0 - s * s))
            .collect();
        g.bridge_w[l].outer_acc(&dpre, &sc.encoder.final_concat);
        axpy(1.0, &dpre, &mut g.bridge_b[l].data);
        t.bridge_w[l].matvec_t_acc(&dpre, &mut dfin);
    }

    for (i, dk) in d_keys.iter().enumerate() {
        g.att_key.outer_acc(dk, &sc.encoded.annotations[i]);
        t.att_key.matvec_t_acc(dk, &mut d_ann[i]);
    }
    axpy(1.0, &dfin[..hd], &mut d_ann[n - 1][..hd]);
    axpy(1.0, &dfin[hd..], &mut d_ann[0][hd..]);

    let mut d_out = d_ann;
    for l in (0..cfg.encoder_layers).rev() {
        let input_dim = if l == 0 { ed } else { 2 * hd };
        let mut d_in = vec![vec![0.0; input_dim]; n];
        let [fwd_cells, bwd_cells] = &sc.encoder.cells[l];
        let [gf, gb] = &mut g.encoder[l];
        let [pf, pb] = &t.encoder[l];

        let mut carry = State::zeros(cfg.cell, hd);
        for i in (0..n).rev() {
            let mut dhi = d_out[i][..hd].to_vec();
            axpy(1.0, &carry.h, &mut dhi);
            let (dx, dprev) = cell::step_backward(cfg.cell, pf, gf, &fwd_cells[i], &dhi, &carry.c);
            axpy(1.0, &dx, &mut d_in[i]);
            carry = dprev;
        }
        let mut carry = State::zeros(cfg.cell, hd);
        for i in 0..n {
            let mut dhi = d_out[i][hd..].to_vec();
            axpy(1.0, &carry.h, &mut dhi);
            let (dx, dprev) = cell::step_backward(cfg.cell, pb, gb, &bwd_cells[i], &dhi, &carry.c);
            axpy(1.0, &dx, &mut d_in[i]);
            carry = dprev;
        }

        if l > 0 {
            for (d, m) in d_in.iter_mut().zip(&sc.encoder.layer_masks[l]) {
                mask_in_place(d, m);
            }
            d_out = d_in;
        } else {
            for ((d, m), &tok) in d_in.iter_mut().zip(&sc.encoder.emb_masks).zip(&sc.source) {
                mask_in_place(d, m);
                axpy(1.0, d, g.src_emb.row_mut(tok as usize));
            }
        }
    }
}

/// Encodes a source sentence for step-wise decoding (no dropout).
pub fn encode(params: &ModelParameters, source: &[TokenId]) -> Result<Encoded> {
    if source.is_empty() {
        return Err(Error::EmptySource);
    }
    check_ids(source, params.config().source_vocab_size, "source")?;
    Ok(encode_cached(params.tensors(), params.config(), source, &mut None).0)
}

/// One decoder step without dropout: next recurrent states and the output
/// distribution over the target vocabulary.
pub fn decode_step(
    params: &ModelParameters,
    encoded: &Encoded,
    states: &[State],
    prev_token: TokenId,
) -> (Vec<State>, Vec<f64>) {
    let (next, cache, _) = decoder_step_cached(
        params.tensors(),
        params.config(),
        encoded,
        states,
        prev_token,
        &mut None,
    );
    (next, cache.probs)
}
