//! Self-describing JSON checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, ModelParameters, Tensors};
use super::tensor::Tensor;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Where a vocabulary lives and what it hashed to when the checkpoint was
/// written.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabRef {
    pub path: PathBuf,
    pub digest: String,
    pub size: usize,
}

impl VocabRef {
    pub fn new(path: impl Into<PathBuf>, vocab: &Vocabulary) -> Self {
        VocabRef {
            path: path.into(),
            digest: vocab.digest(),
            size: vocab.len(),
        }
    }

    pub fn matches(&self, vocab: &Vocabulary) -> bool {
        self.size == vocab.len() && self.digest == vocab.digest()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    run_id: String,
    epoch: usize,
    config: ModelConfig,
    source_vocab: VocabRef,
    target_vocab: VocabRef,
    tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub run_id: String,
    pub epoch: usize,
    pub params: ModelParameters,
    pub source_vocab: VocabRef,
    pub target_vocab: VocabRef,
}

impl Checkpoint {
    pub fn file_name(run_id: &str, epoch: usize) -> String {
        format!("{run_id}.epoch{epoch:02}.ckpt.json")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            format_version: FORMAT_VERSION,
            run_id: self.run_id.clone(),
            epoch: self.epoch,
            config: self.params.config().clone(),
            source_vocab: self.source_vocab.clone(),
            target_vocab: self.target_vocab.clone(),
            tensors: self
                .params
                .tensors()
                .named()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape.clone(),
                    data: t.data.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&file).map_err(|e| Error::Checkpoint {
            path: path.to_owned(),
            detail: e.to_string(),
        })?;
        fs::write(path, json).map_err(|e| Error::output(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Checkpoint {
            path: path.to_owned(),
            detail,
        };
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile =
            serde_json::from_slice(&bytes).map_err(|e| bad(e.to_string()))?;
        if file.format_version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                file.format_version
            )));
        }
        let mut tensors = Tensors::zeros(&file.config);
        let names: Vec<String> = tensors.named().into_iter().map(|(n, _)| n).collect();
        if names.len() != file.tensors.len() {
            return Err(bad(format!(
                "expected {} tensors, found {}",
                names.len(),
                file.tensors.len()
            )));
        }
        for ((name, slot), stored) in names.iter().zip(tensors.tensors_mut()).zip(file.tensors) {
            if *name != stored.name {
                return Err(bad(format!(
                    "expected tensor `{name}`, found `{}`",
                    stored.name
                )));
            }
            if stored.shape != slot.shape || stored.data.len() != slot.len() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: slot.shape.clone(),
                    got: stored.shape,
                });
            }
            *slot = Tensor {
                shape: stored.shape,
                data: stored.data,
            };
        }
        Ok(Checkpoint {
            run_id: file.run_id,
            epoch: file.epoch,
            params: ModelParameters::from_tensors(file.config, tensors)?,
            source_vocab: file.source_vocab,
            target_vocab: file.target_vocab,
        })
    }

    /// Fails unless both vocabularies match the stored digests.
    pub fn check_vocabularies(&self, source: &Vocabulary, target: &Vocabulary) -> Result<()> {
        for (side, r, v) in [
            ("source", &self.source_vocab, source),
            ("target", &self.target_vocab, target),
        ] {
            if !r.matches(v) {
                return Err(Error::VocabMismatch {
                    side,
                    detail: format!(
                        "checkpoint expects {} entries (digest {}), corpus has {} (digest {})",
                        r.size,
                        &r.digest[..12.min(r.digest.len())],
                        v.len(),
                        &v.digest()[..12]
                    ),
                });
            }
        }
        Ok(())
    }
}
