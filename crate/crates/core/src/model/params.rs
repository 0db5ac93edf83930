use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cell::{CellKind, CellParams};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout_prob: f64,
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub cell: CellKind,
    /// Weights are drawn uniformly from `[-init_scale, init_scale]`.
    pub init_scale: f64,
}

impl ModelConfig {
    /// Small model that trains in minutes on a CPU.
    pub fn desk(source_vocab_size: usize, target_vocab_size: usize) -> Self {
        ModelConfig {
            embedding_dim: 16,
            hidden_dim: 32,
            encoder_layers: 1,
            decoder_layers: 1,
            dropout_prob: 0.0,
            source_vocab_size,
            target_vocab_size,
            cell: CellKind::Lstm,
            init_scale: 0.1,
        }
    }

    /// 4-layer bidirectional LSTM, 1000 units, 500-dim embeddings.
    pub fn paper(source_vocab_size: usize, target_vocab_size: usize) -> Self {
        ModelConfig {
            embedding_dim: 500,
            hidden_dim: 1000,
            encoder_layers: 4,
            decoder_layers: 4,
            dropout_prob: 0.3,
            source_vocab_size,
            target_vocab_size,
            cell: CellKind::Lstm,
            init_scale: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embedding_dim", self.embedding_dim),
            ("hidden_dim", self.hidden_dim),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("source_vocab_size", self.source_vocab_size),
            ("target_vocab_size", self.target_vocab_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::Config("dropout_prob must be in [0, 1)".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("init_scale must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn attention_dim(&self) -> usize {
        self.hidden_dim
    }
}

/// Every trainable tensor of the encoder-decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensors {
    pub src_emb: Tensor,
    pub tgt_emb: Tensor,
    /// Per layer, forward then backward direction.
    pub encoder: Vec<[CellParams; 2]>,
    /// Maps the concatenated final encoder states to each decoder layer's
    /// initial hidden state.
    pub bridge_w: Vec<Tensor>,
    pub bridge_b: Vec<Tensor>,
    pub decoder: Vec<CellParams>,
    pub att_query: Tensor,
    pub att_key: Tensor,
    pub att_v: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl Tensors {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (e, h, a) = (cfg.embedding_dim, cfg.hidden_dim, cfg.attention_dim());
        let encoder = (0..cfg.encoder_layers)
            .map(|l| {
                let input = if l == 0 { e } else { 2 * h };
                [
                    CellParams::zeros(cfg.cell, input, h),
                    CellParams::zeros(cfg.cell, input, h),
                ]
            })
            .collect();
        let decoder = (0..cfg.decoder_layers)
            .map(|l| {
                let input = if l == 0 { e + 2 * h } else { h };
                CellParams::zeros(cfg.cell, input, h)
            })
            .collect();
        Tensors {
            src_emb: Tensor::zeros(&[cfg.source_vocab_size, e]),
            tgt_emb: Tensor::zeros(&[cfg.target_vocab_size, e]),
            encoder,
            bridge_w: (0..cfg.decoder_layers)
                .map(|_| Tensor::zeros(&[h, 2 * h]))
                .collect(),
            bridge_b: (0..cfg.decoder_layers)
                .map(|_| Tensor::zeros(&[h]))
                .collect(),
            decoder,
            att_query: Tensor::zeros(&[a, h]),
            att_key: Tensor::zeros(&[a, 2 * h]),
            att_v: Tensor::zeros(&[a]),
            out_w: Tensor::zeros(&[cfg.target_vocab_size, 3 * h]),
            out_b: Tensor::zeros(&[cfg.target_vocab_size]),
        }
    }

    /// Named tensors in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("src_emb".to_string(), &self.src_emb),
            ("tgt_emb".to_string(), &self.tgt_emb),
        ];
        for (l, dirs) in self.encoder.iter().enumerate() {
            for (d, cell) in dirs.iter().enumerate() {
                let dir = if d == 0 { "fwd" } else { "bwd" };
                out.push((format!("encoder.{l}.{dir}.wx"), &cell.wx));
                out.push((format!("encoder.{l}.{dir}.wh"), &cell.wh));
                out.push((format!("encoder.{l}.{dir}.b"), &cell.b));
            }
        }
        for (l, (w, b)) in self.bridge_w.iter().zip(&self.bridge_b).enumerate() {
            out.push((format!("bridge.{l}.w"), w));
            out.push((format!("bridge.{l}.b"), b));
        }
        for (l, cell) in self.decoder.iter().enumerate() {
            out.push((format!("decoder.{l}.wx"), &cell.wx));
            out.push((format!("decoder.{l}.wh"), &cell.wh));
            out.push((format!("decoder.{l}.b"), &cell.b));
        }
        out.push(("attention.query".into(), &self.att_query));
        out.push(("attention.key".into(), &self.att_key));
        out.push(("attention.v".into(), &self.att_v));
        out.push(("output.w".into(), &self.out_w));
        out.push(("output.b".into(), &self.out_b));
        out
    }

    /// Mutable tensors in the same order as [`Tensors::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.src_emb, &mut self.tgt_emb];
        for dirs in self.encoder.iter_mut() {
            for cell in dirs.iter_mut() {
                out.push(&mut cell.wx);
                out.push(&mut cell.wh);
                out.push(&mut cell.b);
            }
        }
        for (w, b) in self.bridge_w.iter_mut().zip(self.bridge_b.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        for cell in self.decoder.iter_mut() {
            out.push(&mut cell.wx);
            out.push(&mut cell.wh);
            out.push(&mut cell.b);
        }
        out.push(&mut self.att_query);
        out.push(&mut self.att_key);
        out.push(&mut self.att_v);
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        out
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Trainable weights plus the configuration that fixes their shapes.
///
/// Each mutation assigns a new stamp so that forward records taken before
/// the change are detected as stale.
#[derive(Debug, Clone)]
pub struct ModelParameters {
    config: ModelConfig,
    tensors: Tensors,
    stamp: u64,
}

impl PartialEq for ModelParameters {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors == other.tensors
    }
}

impl ModelParameters {
    pub fn from_tensors(config: ModelConfig, tensors: Tensors) -> Result<Self> {
        config.validate()?;
        let expected = Tensors::zeros(&config);
        for ((name, want), (_, got)) in expected.named().iter().zip(tensors.named()) {
            if want.shape != got.shape {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: want.shape.clone(),
                    got: got.shape.clone(),
                });
            }
        }
        Ok(ModelParameters {
            config,
            tensors,
            stamp: fresh_stamp(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &Tensors {
        &self.tensors
    }

    /// Mutable access; invalidates outstanding forward records.
    pub fn tensors_mut(&mut self) -> &mut Tensors {
        self.stamp = fresh_stamp();
        &mut self.tensors
    }

    pub fn stamp(&self) -> u64 {
        self.stamp
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.count()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.named().iter().all(|(_, t)| t.is_finite())
    }
}

/// Seeded uniform initialization in `[-r, r]`; biases start at zero.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParameters> {
    config.validate()?;
    let mut tensors = Tensors::zeros(config);
    let r = config.init_scale;
    if r > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = tensors.named().into_iter().map(|(n, _)| n).collect();
        for (name, t) in names.iter().zip(tensors.tensors_mut()) {
            if is_bias(name) {
                continue;
            }
            for v in t.data.iter_mut() {
                *v = rng.gen_range(-r..=r);
            }
        }
    }
    ModelParameters::from_tensors(config.clone(), tensors)
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".b")
}

/// Gradients with the same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Tensors,
}

impl Gradients {
    pub fn zeros(config: &ModelConfig) -> Self {
        Gradients {
            tensors: Tensors::zeros(config),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .named()
            .iter()
            .map(|(_, t)| t.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for t in self.tensors.tensors_mut() {
                t.data.iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }
}

/// `θ ← θ − lr·g` for every tensor.
pub fn sgd_step(params: &mut ModelParameters, grads: &Gradients, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!(
            "learning rate must be >= 0, got {lr}"
        )));
    }
    let grad_named = grads.tensors.named();
    let param_named = params.tensors.named();
    for ((name, p), (_, g)) in param_named.iter().zip(&grad_named) {
        if p.shape != g.shape {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected: p.shape.clone(),
                got: g.shape.clone(),
            });
        }
    }
    if param_named.len() != grad_named.len() {
        return Err(Error::ShapeMismatch {
            name: "tensor list".into(),
            expected: vec![param_named.len()],
            got: vec![grad_named.len()],
        });
    }
    if lr == 0.0 {
        return Ok(());
    }
    for (p, (_, g)) in params
        .tensors_mut()
        .tensors_mut()
        .into_iter()
        .zip(grad_named)
    {
        for (pv, gv) in p.data.iter_mut().zip(&g.data) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}
