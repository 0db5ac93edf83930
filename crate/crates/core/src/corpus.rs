//! Parallel text loading, vocabularies, length filtering and seeded batching.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;
pub type UnitId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

pub const DEFAULT_MAX_LEN: usize = 80;
pub const DEFAULT_VOCAB_CAP: usize = 50_000;
pub const DEFAULT_BATCH_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Source => "source",
            Side::Target => "target",
        }
    }
}

/// A whitespace-tokenized sentence pair before numericalization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextPair {
    pub id: UnitId,
    pub source: Vec<String>,
    pub target: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TextCorpus {
    pub pairs: Vec<TextPair>,
}

impl TextCorpus {
    pub fn from_lines<S: AsRef<str>>(source: &[S], target: &[S]) -> Result<Self> {
        if source.len() != target.len() {
            return Err(Error::LineCountMismatch {
                source_lines: source.len(),
                target_lines: target.len(),
            });
        }
        let pairs = source
            .iter()
            .zip(target)
            .enumerate()
            .map(|(i, (s, t))| TextPair {
                id: i as UnitId,
                source: tokenize(s.as_ref()),
                target: tokenize(t.as_ref()),
            })
            .collect();
        Ok(TextCorpus { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn ids(&self) -> Vec<UnitId> {
        self.pairs.iter().map(|p| p.id).collect()
    }

    pub fn token_counts(&self) -> (usize, usize) {
        self.pairs
            .iter()
            .fold((0, 0), |(s, t), p| (s + p.source.len(), t + p.target.len()))
    }

    /// Keeps only the pairs whose id is listed, preserving ids.
    pub fn retain_ids(&self, ids: &[UnitId]) -> TextCorpus {
        let keep: std::collections::HashSet<UnitId> = ids.iter().copied().collect();
        TextCorpus {
            pairs: self
                .pairs
                .iter()
                .filter(|p| keep.contains(&p.id))
                .cloned()
                .collect(),
        }
    }
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_owned).collect()
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(" ")
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Reads two line-parallel files. Ids are assigned 0..N-1 in file order.
pub fn load_bitext(source_path: &Path, target_path: &Path) -> Result<TextCorpus> {
    let source = read_lines(source_path)?;
    let target = read_lines(target_path)?;
    TextCorpus::from_lines(&source, &target)
}

/// Retains pairs with `1 <= n <= max_len` and `1 <= m <= max_len`. Ids are
/// not renumbered.
pub fn filter_by_length(corpus: &TextCorpus, max_len: usize) -> TextCorpus {
    TextCorpus {
        pairs: corpus
            .pairs
            .iter()
            .filter(|p| {
                (1..=max_len).contains(&p.source.len()) && (1..=max_len).contains(&p.target.len())
            })
            .cloned()
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry `{tok}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(RESERVED[UNK as usize])
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn numericalize<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Hex SHA-256 over the file representation; equal digests mean equal
    /// vocabularies.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_file_string().as_bytes());
        hex(&hasher.finalize())
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(tok);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::output(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err(Error::Config(format!(
                "{}: vocabulary file must start with {:?}",
                path.display(),
                RESERVED
            )));
        }
        Self::from_tokens(tokens)
    }
}

/// Ranks tokens by frequency (ties by first occurrence) and keeps the top
/// `cap - 4` after the reserved entries.
pub fn build_vocab(corpus: &TextCorpus, side: Side, cap: usize) -> Result<Vocabulary> {
    if cap < RESERVED.len() + 1 {
        return Err(Error::VocabCapTooSmall(cap));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    // token -> (count, first occurrence)
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    let mut order = 0usize;
    for pair in &corpus.pairs {
        let toks = match side {
            Side::Source => &pair.source,
            Side::Target => &pair.target,
        };
        for tok in toks {
            if RESERVED.contains(&tok.as_str()) {
                continue;
            }
            let e = counts.entry(tok.as_str()).or_insert((0, order));
            e.0 += 1;
            order += 1;
        }
    }
    let mut ranked: Vec<(&str, usize, usize)> =
        counts.into_iter().map(|(t, (c, f))| (t, c, f)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(
            ranked
                .into_iter()
                .take(cap - RESERVED.len())
                .map(|(t, _, _)| t.to_owned()),
        )
        .collect();
    Vocabulary::from_tokens(tokens)
}

/// A numericalized pair. `target` holds y_1..y_m without BOS/EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub id: UnitId,
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl SentencePair {
    /// Target length as scored by the model: m tokens plus EOS.
    pub fn target_len(&self) -> usize {
        self.target.len() + 1
    }
}

/// Numericalized corpus bound to its vocabularies. Keeps the surface text so
/// that references can be scored on the original tokens.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub pairs: Vec<SentencePair>,
    pub text: TextCorpus,
    pub source_vocab: Vocabulary,
    pub target_vocab: Vocabulary,
    position: HashMap<UnitId, usize>,
}

impl Corpus {
    pub fn new(text: TextCorpus, source_vocab: Vocabulary, target_vocab: Vocabulary) -> Self {
        let pairs: Vec<SentencePair> = text
            .pairs
            .iter()
            .map(|p| SentencePair {
                id: p.id,
                source: source_vocab.numericalize(&p.source),
                target: target_vocab.numericalize(&p.target),
            })
            .collect();
        let position = pairs.iter().enumerate().map(|(i, p)| (p.id, i)).collect();
        Corpus {
            pairs,
            text,
            source_vocab,
            target_vocab,
            position,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn ids(&self) -> Vec<UnitId> {
        self.pairs.iter().map(|p| p.id).collect()
    }

    pub fn get(&self, id: UnitId) -> Option<&SentencePair> {
        self.position.get(&id).map(|&i| &self.pairs[i])
    }

    pub fn reference(&self, id: UnitId) -> Option<&[String]> {
        self.position
            .get(&id)
            .map(|&i| self.text.pairs[i].target.as_slice())
    }
}

/// One mini-batch. Rows are padded with PAD; `target` rows hold y_1..y_m EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<UnitId>,
    pub source: Vec<Vec<TokenId>>,
    pub target: Vec<Vec<TokenId>>,
    pub source_lengths: Vec<usize>,
    /// Real target tokens per member, EOS included, PAD excluded.
    pub target_lengths: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&SentencePair]) -> Self {
        let src_width = pairs.iter().map(|p| p.source.len()).max().unwrap_or(0);
        let tgt_width = pairs.iter().map(|p| p.target_len()).max().unwrap_or(0);
        let mut batch = Batch {
            ids: Vec::with_capacity(pairs.len()),
            source: Vec::with_capacity(pairs.len()),
            target: Vec::with_capacity(pairs.len()),
            source_lengths: Vec::with_capacity(pairs.len()),
            target_lengths: Vec::with_capacity(pairs.len()),
        };
        for p in pairs {
            let mut src = p.source.clone();
            src.resize(src_width, PAD);
            let mut tgt = p.target.clone();
            tgt.push(EOS);
            tgt.resize(tgt_width, PAD);
            batch.ids.push(p.id);
            batch.source.push(src);
            batch.target.push(tgt);
            batch.source_lengths.push(p.source.len());
            batch.target_lengths.push(p.target_len());
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn target_tokens(&self) -> usize {
        self.target_lengths.iter().sum()
    }

    pub fn source_row(&self, i: usize) -> &[TokenId] {
        &self.source[i][..self.source_lengths[i]]
    }

    pub fn target_row(&self, i: usize) -> &[TokenId] {
        &self.target[i][..self.target_lengths[i]]
    }
}

/// Shuffles `plan` with a seeded permutation and chunks it into batches.
/// Duplicated ids produce duplicated members.
pub fn make_batches(
    plan: &[UnitId],
    corpus: &Corpus,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut members = Vec::with_capacity(plan.len());
    for &id in plan {
        members.push(corpus.get(id).ok_or(Error::UnknownId(id))?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    members.shuffle(&mut rng);
    Ok(members.chunks(batch_size).map(Batch::from_pairs).collect())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of a string.
pub fn text_digest(text: &str) -> String {
    hex(&Sha256::digest(text.as_bytes()))
}

/// Hex SHA-256 of a file's contents.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Writes lines with LF endings.
pub fn write_lines<I, S>(path: &Path, lines: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut out = Vec::new();
    for line in lines {
        out.extend_from_slice(line.as_ref().as_bytes());
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::output(path, e))?;
    file.write_all(&out).map_err(|e| Error::output(path, e))
}
