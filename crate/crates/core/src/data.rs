//! Vocabulary, parallel corpora, synthetic translation tasks and batching.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
/// The `<m>` symbol used when jointly masking hypothesis and reference.
pub const MASK: TokenId = 2;
pub const NUM_RESERVED: usize = 3;

const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<unk>", "<m>"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Malformed {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("invalid generator parameters: {0}")]
    Parameters(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Token/ID bijection with `<pad>`, `<unk>`, `<m>` at IDs 0, 1, 2.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            v.add(t);
        }
        v
    }

    /// Reserved symbols followed by `w0 .. w{content-1}`.
    pub fn synthetic(content: usize) -> Self {
        let mut v = Self::new();
        for i in 0..content {
            v.add(&format!("w{i}"));
        }
        v
    }

    pub fn add(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn content_len(&self) -> usize {
        self.tokens.len() - NUM_RESERVED
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Whitespace tokenization; unknown tokens become `UNK`. Returns the
    /// number of unknown tokens alongside the IDs.
    pub fn encode(&self, line: &str) -> (Vec<TokenId>, usize) {
        let mut unknown = 0;
        let ids = line
            .split_whitespace()
            .map(|t| {
                self.id(t).unwrap_or_else(|| {
                    unknown += 1;
                    UNK
                })
            })
            .collect();
        (ids, unknown)
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for (i, line) in text.lines().enumerate() {
            let tok = line.trim();
            let malformed = |msg: String| DataError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            if i < NUM_RESERVED && tok != RESERVED[i] {
                return Err(malformed(format!("expected reserved token {}", RESERVED[i])));
            }
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(malformed(format!("invalid token {line:?}")));
            }
            if v.index.contains_key(tok) {
                return Err(malformed(format!("duplicate token {tok}")));
            }
            v.add(tok);
        }
        if v.len() < NUM_RESERVED {
            return Err(DataError::Malformed {
                path: path.to_path_buf(),
                line: v.len() + 1,
                msg: "missing reserved tokens".into(),
            });
        }
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.pairs
            .iter()
            .map(|p| p.source.len().max(p.target.len()))
            .max()
            .unwrap_or(0)
    }

    /// Splits off consecutive chunks of the given sizes.
    pub fn split(&self, sizes: &[usize]) -> Vec<ParallelCorpus> {
        let mut out = Vec::new();
        let mut start = 0;
        for &n in sizes {
            let end = (start + n).min(self.pairs.len());
            out.push(ParallelCorpus {
                pairs: self.pairs[start..end].to_vec(),
            });
            start = end;
        }
        out
    }

    pub fn sources(&self) -> Vec<Vec<TokenId>> {
        self.pairs.iter().map(|p| p.source.clone()).collect()
    }

    pub fn targets(&self) -> Vec<Vec<TokenId>> {
        self.pairs.iter().map(|p| p.target.clone()).collect()
    }
}

/// Deterministic token-wise source-to-target dictionary. Each source type
/// maps to one target token, or to two when it was drawn as an expanding
/// type.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMap {
    primary: Vec<TokenId>,
    expansion: Vec<Option<TokenId>>,
}

impl TokenMap {
    pub fn random(vocab_size: usize, expand_prob: f64, rng: &mut impl Rng) -> Self {
        let content: Vec<TokenId> = (0..vocab_size)
            .map(|i| (i + NUM_RESERVED) as TokenId)
            .collect();
        let mut primary = content.clone();
        primary.shuffle(rng);
        let mut secondary = content;
        secondary.shuffle(rng);
        let expansion = secondary
            .into_iter()
            .map(|t| rng.gen_bool(expand_prob).then_some(t))
            .collect();
        TokenMap { primary, expansion }
    }

    pub fn vocab_size(&self) -> usize {
        self.primary.len()
    }

    pub fn map_token(&self, t: TokenId, out: &mut Vec<TokenId>) {
        let i = t as usize - NUM_RESERVED;
        out.push(self.primary[i]);
        if let Some(e) = self.expansion[i] {
            out.push(e);
        }
    }

    pub fn map(&self, source: &[TokenId]) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(source.len());
        for &t in source {
            self.map_token(t, &mut out);
        }
        out
    }

    /// The two valid references of a multimodal source: mapped halves in
    /// original order and swapped.
    pub fn multimodal_candidates(&self, source: &[TokenId]) -> [Vec<TokenId>; 2] {
        let half = source.len() / 2;
        let (first, second) = (self.map(&source[..half]), self.map(&source[half..]));
        let a = [first.as_slice(), second.as_slice()].concat();
        let b = [second.as_slice(), first.as_slice()].concat();
        [a, b]
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedTask {
    pub corpus: ParallelCorpus,
    pub map: TokenMap,
}

fn check_params(vocab_size: usize, len_range: &RangeInclusive<usize>) -> Result<(), DataError> {
    if vocab_size < 8 {
        return Err(DataError::Parameters(format!(
            "vocab_size {vocab_size} < 8"
        )));
    }
    if *len_range.start() < 1 || len_range.start() > len_range.end() {
        return Err(DataError::Parameters(format!(
            "bad length range {len_range:?}"
        )));
    }
    Ok(())
}

fn random_source(
    vocab_size: usize,
    len_range: &RangeInclusive<usize>,
    rng: &mut impl Rng,
) -> Vec<TokenId> {
    let len = rng.gen_range(len_range.clone());
    (0..len)
        .map(|_| (rng.gen_range(0..vocab_size) + NUM_RESERVED) as TokenId)
        .collect()
}

/// Dictionary-mapping task: the target is a deterministic function of the
/// source. The dictionary is drawn first from `rng`; with `expand_prob > 0`
/// some source types map to two target tokens, so target length varies.
pub fn gen_mapping_task(
    n_pairs: usize,
    vocab_size: usize,
    len_range: RangeInclusive<usize>,
    expand_prob: f64,
    rng: &mut impl Rng,
) -> Result<GeneratedTask, DataError> {
    check_params(vocab_size, &len_range)?;
    if !(0.0..=1.0).contains(&expand_prob) {
        return Err(DataError::Parameters(format!(
            "expand_prob {expand_prob} outside [0, 1]"
        )));
    }
    let map = TokenMap::random(vocab_size, expand_prob, rng);
    let pairs = (0..n_pairs)
        .map(|_| {
            let source = random_source(vocab_size, &len_range, rng);
            let target = map.map(&source);
            SentencePair { source, target }
        })
        .collect();
    Ok(GeneratedTask {
        corpus: ParallelCorpus { pairs },
        map,
    })
}

/// Two-mode task: every source has two valid references (mapped halves in
/// either order) and one of them, chosen uniformly, is emitted.
pub fn gen_multimodal_task(
    n_pairs: usize,
    vocab_size: usize,
    len_range: RangeInclusive<usize>,
    rng: &mut impl Rng,
) -> Result<GeneratedTask, DataError> {
    check_params(vocab_size, &len_range)?;
    let map = TokenMap::random(vocab_size, 0.0, rng);
    let pairs = (0..n_pairs)
        .map(|_| {
            let source = random_source(vocab_size, &len_range, rng);
            let [a, b] = map.multimodal_candidates(&source);
            let target = if rng.gen_bool(0.5) { b } else { a };
            SentencePair { source, target }
        })
        .collect();
    Ok(GeneratedTask {
        corpus: ParallelCorpus { pairs },
        map,
    })
}

/// Reads `source<TAB>target` lines. Returns the corpus and the number of
/// tokens that were not in `vocab` (mapped to `UNK`).
pub fn load_tsv(path: &Path, vocab: &Vocab) -> Result<(ParallelCorpus, usize), DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut pairs = Vec::new();
    let mut unknown = 0;
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let malformed = |msg: &str| DataError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let (src, tgt) = line
            .split_once('\t')
            .ok_or_else(|| malformed("missing TAB separator"))?;
        if tgt.contains('\t') {
            return Err(malformed("more than one TAB"));
        }
        let (source, u1) = vocab.encode(src);
        let (target, u2) = vocab.encode(tgt);
        if source.is_empty() || target.is_empty() {
            return Err(malformed("empty sequence"));
        }
        unknown += u1 + u2;
        pairs.push(SentencePair { source, target });
    }
    if unknown > 0 {
        log::warn!("{}: {unknown} unknown tokens mapped to <unk>", path.display());
    }
    Ok((ParallelCorpus { pairs }, unknown))
}

pub fn save_tsv(corpus: &ParallelCorpus, vocab: &Vocab, path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    for p in &corpus.pairs {
        let _ = writeln!(out, "{}\t{}", vocab.decode(&p.source), vocab.decode(&p.target));
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Row-major `[rows, width]` block of token IDs padded with `PAD`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedBlock {
    pub width: usize,
    pub lengths: Vec<usize>,
    pub ids: Vec<TokenId>,
}

impl PaddedBlock {
    fn build(seqs: &[&[TokenId]]) -> Self {
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(width * seqs.len());
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat(PAD).take(width - s.len()));
        }
        PaddedBlock {
            width,
            lengths: seqs.iter().map(|s| s.len()).collect(),
            ids,
        }
    }

    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    /// Row `i` without padding.
    pub fn row(&self, i: usize) -> &[TokenId] {
        &self.ids[i * self.width..i * self.width + self.lengths[i]]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Corpus indices of the sentences in this batch.
    pub indices: Vec<usize>,
    pub source: PaddedBlock,
    pub target: PaddedBlock,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Padded token count: rows times the wider of the two blocks.
    pub fn padded_tokens(&self) -> usize {
        self.len() * self.source.width.max(self.target.width)
    }
}

/// Endless stream of length-bucketed, shuffled, token-budgeted batches.
/// Each epoch visits every sentence exactly once.
pub struct Batcher<'c> {
    corpus: &'c ParallelCorpus,
    budget: usize,
    rng: ChaCha8Rng,
    pending: Vec<Vec<usize>>,
    epoch: usize,
}

impl<'c> Batcher<'c> {
    pub fn new(corpus: &'c ParallelCorpus, batch_size_tokens: usize, rng: ChaCha8Rng) -> Self {
        assert!(
            batch_size_tokens >= corpus.max_len(),
            "token budget {batch_size_tokens} below longest sentence {}",
            corpus.max_len()
        );
        Batcher {
            corpus,
            budget: batch_size_tokens,
            rng,
            pending: Vec::new(),
            epoch: 0,
        }
    }

    /// Number of completed epoch plans (the current one included).
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn plan_epoch(&mut self) {
        let len = |i: usize| {
            let p = &self.corpus.pairs[i];
            p.source.len().max(p.target.len())
        };
        let mut keyed: Vec<(usize, u64, usize)> = (0..self.corpus.len())
            .map(|i| (len(i), self.rng.gen::<u64>(), i))
            .collect();
        keyed.sort_unstable();
        let mut batches = Vec::new();
        let mut current: Vec<usize> = Vec::new();
        let mut width = 0;
        for (l, _, i) in keyed {
            if !current.is_empty() && (current.len() + 1) * width.max(l) > self.budget {
                batches.push(std::mem::take(&mut current));
                width = 0;
            }
            width = width.max(l);
            current.push(i);
        }
        if !current.is_empty() {
            batches.push(current);
        }
        batches.shuffle(&mut self.rng);
        batches.reverse();
        self.pending = batches;
        self.epoch += 1;
    }

    fn make_batch(&self, indices: Vec<usize>) -> Batch {
        let src: Vec<&[TokenId]> = indices
            .iter()
            .map(|&i| self.corpus.pairs[i].source.as_slice())
            .collect();
        let tgt: Vec<&[TokenId]> = indices
            .iter()
            .map(|&i| self.corpus.pairs[i].target.as_slice())
            .collect();
        Batch {
            source: PaddedBlock::build(&src),
            target: PaddedBlock::build(&tgt),
            indices,
        }
    }
}

impl Iterator for Batcher<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.corpus.is_empty() {
            return None;
        }
        if self.pending.is_empty() {
            self.plan_epoch();
        }
        let indices = self.pending.pop()?;
        Some(self.make_batch(indices))
    }
}
