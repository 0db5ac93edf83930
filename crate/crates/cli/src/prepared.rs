//! Layout of a prepared corpus directory.

use std::path::{Path, PathBuf};

use boostnmt_core::corpus::{load_bitext, Corpus, Vocabulary};

use crate::error::{CliError, CliResult};

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];
pub const SOURCE_VOCAB: &str = "vocab.src";
pub const TARGET_VOCAB: &str = "vocab.tgt";
pub const TRAIN_IDS: &str = "train.ids";
pub const STATS: &str = "stats.txt";

pub fn split_paths(dir: &Path, split: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{split}.src")),
        dir.join(format!("{split}.tgt")),
    )
}

/// Every input file a run depends on, relative to the directory.
pub fn data_files(dir: &Path) -> Vec<String> {
    let mut files = Vec::new();
    for split in SPLITS {
        let (s, _) = split_paths(dir, split);
        if split != "test" || s.exists() {
            files.push(format!("{split}.src"));
            files.push(format!("{split}.tgt"));
        }
    }
    files.push(SOURCE_VOCAB.into());
    files.push(TARGET_VOCAB.into());
    files
}

pub struct Prepared {
    pub dir: PathBuf,
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Option<Corpus>,
}

impl Prepared {
    pub fn load(dir: &Path) -> CliResult<Self> {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!(
                "{}: not a prepared corpus directory",
                dir.display()
            )));
        }
        let sv = Vocabulary::load(&dir.join(SOURCE_VOCAB))?;
        let tv = Vocabulary::load(&dir.join(TARGET_VOCAB))?;
        let split = |name: &str| -> CliResult<Corpus> {
            let (s, t) = split_paths(dir, name);
            Ok(Corpus::new(load_bitext(&s, &t)?, sv.clone(), tv.clone()))
        };
        let test = if split_paths(dir, "test").0.exists() {
            Some(split("test")?)
        } else {
            None
        };
        Ok(Prepared {
            dir: dir.to_owned(),
            train: split("train")?,
            valid: split("valid")?,
            test,
        })
    }

    pub fn split(&self, name: &str) -> CliResult<&Corpus> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => self.test.as_ref().ok_or_else(|| {
                CliError::Usage(format!("{} has no test split", self.dir.display()))
            }),
            other => Err(CliError::Usage(format!(
                "unknown split `{other}` (expected train, valid or test)"
            ))),
        }
    }

    pub fn vocab_paths(&self) -> (PathBuf, PathBuf) {
        (self.dir.join(SOURCE_VOCAB), self.dir.join(TARGET_VOCAB))
    }
}
