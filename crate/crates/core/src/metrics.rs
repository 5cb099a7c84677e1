//! Sequence similarity rewards and corpus-level evaluation metrics.
//!
//! All sentence-level rewards lie in `[0, 1]` and operate on token
//! sequences; chrF works on characters of the space-joined token strings.
//! The `<m>` mask symbol is an ordinary token everywhere: two masked slots
//! match each other.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;

use thiserror::Error;

use crate::data::{TokenId, Vocab, MASK};
use crate::sampling::MaskedPair;

/// Stand-in character for `<m>` in chrF.
const MASK_CHAR: char = '\u{E000}';

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("hypothesis and reference are both empty")]
    BothEmpty,
    #[error("reference is empty")]
    EmptyReference,
    #[error("maximum n-gram order must be at least 1")]
    ZeroOrder,
    #[error("{hyps} hypotheses but {refs} references")]
    CountMismatch { hyps: usize, refs: usize },
    #[error("unknown metric {0:?} (expected gleu, bleu, chrf, ter or rouge2)")]
    UnknownMetric(String),
}

/// A similarity score in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Reward(f64);

impl Reward {
    pub const MAX: f64 = 1.0;

    fn new(v: f64) -> Self {
        debug_assert!((0.0..=1.0 + 1e-12).contains(&v), "reward {v} out of range");
        Reward(v.clamp(0.0, 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    Gleu,
    Bleu,
    Chrf,
    Ter,
    Rouge2,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Gleu,
        Metric::Bleu,
        Metric::Chrf,
        Metric::Ter,
        Metric::Rouge2,
    ];

    /// Sentence-level score of token sequences. `max_ngram` applies to GLEU
    /// and BLEU; chrF always uses character 6-grams with beta 2.
    pub fn score(
        self,
        hyp: &[TokenId],
        reference: &[TokenId],
        max_ngram: usize,
        vocab: &Vocab,
    ) -> Result<Reward, MetricError> {
        match self {
            Metric::Gleu => gleu(hyp, reference, max_ngram),
            Metric::Bleu => bleu_sentence(hyp, reference, max_ngram),
            Metric::Chrf => {
                let (h, r) = (chrf_text(hyp, vocab), chrf_text(reference, vocab));
                chrf(&h, &r, 6, 2.0)
            }
            Metric::Ter => ter_reward(hyp, reference),
            Metric::Rouge2 => Ok(rouge2(hyp, reference)),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Metric::Gleu => "gleu",
            Metric::Bleu => "bleu",
            Metric::Chrf => "chrf",
            Metric::Ter => "ter",
            Metric::Rouge2 => "rouge2",
        };
        f.write_str(s)
    }
}

impl FromStr for Metric {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gleu" => Ok(Metric::Gleu),
            "bleu" => Ok(Metric::Bleu),
            "chrf" => Ok(Metric::Chrf),
            "ter" => Ok(Metric::Ter),
            "rouge2" | "rouge-2" => Ok(Metric::Rouge2),
            _ => Err(MetricError::UnknownMetric(s.to_string())),
        }
    }
}

/// Counts of every n-gram of order `1..=max_n` in one sequence.
pub struct NgramMultiset<'a, T> {
    orders: Vec<HashMap<&'a [T], usize>>,
    totals: Vec<usize>,
}

impl<'a, T: Eq + Hash> NgramMultiset<'a, T> {
    pub fn new(seq: &'a [T], max_n: usize) -> Self {
        let mut orders = Vec::with_capacity(max_n);
        let mut totals = Vec::with_capacity(max_n);
        for n in 1..=max_n {
            let mut m = HashMap::new();
            let total = if seq.len() >= n { seq.len() - n + 1 } else { 0 };
            for g in seq.windows(n) {
                *m.entry(g).or_insert(0) += 1;
            }
            orders.push(m);
            totals.push(total);
        }
        NgramMultiset { orders, totals }
    }

    /// Number of n-grams of order `n` (`max(T - n + 1, 0)`).
    pub fn total(&self, n: usize) -> usize {
        self.totals[n - 1]
    }

    pub fn count(&self, gram: &[T]) -> usize {
        self.orders
            .get(gram.len().wrapping_sub(1))
            .and_then(|m| m.get(gram))
            .copied()
            .unwrap_or(0)
    }

    /// `sum_g min(count_self(g), count_other(g))` over order-`n` grams.
    pub fn clipped_matches(&self, other: &Self, n: usize) -> usize {
        let (a, b) = (&self.orders[n - 1], &other.orders[n - 1]);
        let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        small
            .iter()
            .map(|(g, &c)| c.min(large.get(g).copied().unwrap_or(0)))
            .sum()
    }
}

/// Pooled GLEU: n-gram matches and totals are summed over orders `1..=N`
/// before taking `min(precision, recall)`. A side with no n-grams has
/// precision (or recall) 0.
pub fn gleu<T: Eq + Hash>(hyp: &[T], reference: &[T], max_n: usize) -> Result<Reward, MetricError> {
    if max_n == 0 {
        return Err(MetricError::ZeroOrder);
    }
    if hyp.is_empty() && reference.is_empty() {
        return Err(MetricError::BothEmpty);
    }
    let (h, r) = (NgramMultiset::new(hyp, max_n), NgramMultiset::new(reference, max_n));
    let (mut matches, mut hyp_total, mut ref_total) = (0, 0, 0);
    for n in 1..=max_n {
        matches += h.clipped_matches(&r, n);
        hyp_total += h.total(n);
        ref_total += r.total(n);
    }
    let ratio = |m: usize, t: usize| if t == 0 { 0.0 } else { m as f64 / t as f64 };
    Ok(Reward::new(ratio(matches, hyp_total).min(ratio(matches, ref_total))))
}

/// Sentence BLEU: geometric mean of clipped precisions (add-one smoothing
/// for orders >= 2) times `exp(min(0, 1 - |ref| / |hyp|))`.
pub fn bleu_sentence<T: Eq + Hash>(
    hyp: &[T],
    reference: &[T],
    max_n: usize,
) -> Result<Reward, MetricError> {
    if max_n == 0 {
        return Err(MetricError::ZeroOrder);
    }
    if hyp.is_empty() {
        return Ok(Reward::new(0.0));
    }
    let (h, r) = (NgramMultiset::new(hyp, max_n), NgramMultiset::new(reference, max_n));
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let m = h.clipped_matches(&r, n) as f64;
        let t = h.total(n) as f64;
        let p = if n == 1 { m / t } else { (m + 1.0) / (t + 1.0) };
        if p == 0.0 {
            return Ok(Reward::new(0.0));
        }
        log_sum += p.ln();
    }
    let bp = (1.0 - reference.len() as f64 / hyp.len() as f64).min(0.0);
    Ok(Reward::new((log_sum / max_n as f64 + bp).exp()))
}

/// Space-joined token text for chrF, with `<m>` as a single reserved
/// character.
pub fn chrf_text(ids: &[TokenId], vocab: &Vocab) -> String {
    let mut s = String::new();
    for (i, &t) in ids.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        if t == MASK {
            s.push(MASK_CHAR);
        } else {
            s.push_str(vocab.token(t).unwrap_or("<unk>"));
        }
    }
    s
}

/// Character n-gram F-beta averaged over orders `1..=n_char`; orders where
/// both sides have no n-grams are skipped.
pub fn chrf(hyp: &str, reference: &str, n_char: usize, beta: f64) -> Result<Reward, MetricError> {
    if n_char == 0 {
        return Err(MetricError::ZeroOrder);
    }
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    let hc: Vec<char> = hyp.chars().collect();
    let rc: Vec<char> = reference.chars().collect();
    let (h, r) = (NgramMultiset::new(&hc, n_char), NgramMultiset::new(&rc, n_char));
    let b2 = beta * beta;
    let mut sum = 0.0;
    let mut orders = 0;
    for n in 1..=n_char {
        let (ht, rt) = (h.total(n), r.total(n));
        if ht == 0 && rt == 0 {
            continue;
        }
        orders += 1;
        let m = h.clipped_matches(&r, n) as f64;
        if m == 0.0 {
            continue;
        }
        let (p, rec) = (m / ht as f64, m / rt as f64);
        sum += (1.0 + b2) * p * rec / (b2 * p + rec);
    }
    Ok(Reward::new(if orders == 0 { 0.0 } else { sum / orders as f64 }))
}

/// Token-level Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `max(0, 1 - edits / |ref|)` with insert/delete/substitute edits only.
/// TER's block shifts are not modelled, so this is an edit-rate reward
/// rather than full TER.
pub fn ter_reward<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<Reward, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    let d = edit_distance(hyp, reference) as f64;
    Ok(Reward::new((1.0 - d / reference.len() as f64).max(0.0)))
}

/// Bigram F1 over clipped matches; 0 when either side has no bigrams.
pub fn rouge2<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> Reward {
    let (h, r) = (NgramMultiset::new(hyp, 2), NgramMultiset::new(reference, 2));
    let (ht, rt) = (h.total(2), r.total(2));
    if ht == 0 || rt == 0 {
        return Reward::new(0.0);
    }
    let m = h.clipped_matches(&r, 2) as f64;
    if m == 0.0 {
        return Reward::new(0.0);
    }
    let (p, rec) = (m / ht as f64, m / rt as f64);
    Reward::new(2.0 * p * rec / (p + rec))
}

/// Scores a jointly masked pair; `<m>` slots are ordinary matching tokens.
pub fn score_masked_pair(
    pair: &MaskedPair,
    metric: Metric,
    max_ngram: usize,
    vocab: &Vocab,
) -> Result<Reward, MetricError> {
    metric.score(&pair.hypothesis, &pair.reference, max_ngram, vocab)
}

/// Per-order clipped matches and totals, plus lengths, for one sentence.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NgramStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub ref_totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl NgramStats {
    pub fn compute<T: Eq + Hash>(hyp: &[T], reference: &[T], max_n: usize) -> Self {
        let (h, r) = (NgramMultiset::new(hyp, max_n), NgramMultiset::new(reference, max_n));
        NgramStats {
            matches: (1..=max_n).map(|n| h.clipped_matches(&r, n)).collect(),
            totals: (1..=max_n).map(|n| h.total(n)).collect(),
            ref_totals: (1..=max_n).map(|n| r.total(n)).collect(),
            hyp_len: hyp.len(),
            ref_len: reference.len(),
        }
    }

    pub fn accumulate(&mut self, other: &NgramStats) {
        if self.matches.is_empty() {
            *self = other.clone();
            return;
        }
        for n in 0..self.matches.len() {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
            self.ref_totals[n] += other.ref_totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// Unsmoothed BLEU on a `[0, 100]` scale from aggregated statistics.
    pub fn bleu(&self) -> f64 {
        let n = self.matches.len();
        if n == 0 || self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for i in 0..n {
            if self.matches[i] == 0 || self.totals[i] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[i] as f64 / self.totals[i] as f64).ln();
        }
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let bp = if c > r { 0.0 } else { 1.0 - r / c };
        100.0 * (log_sum / n as f64 + bp).exp()
    }

    /// Pooled GLEU on a `[0, 100]` scale from aggregated statistics.
    pub fn gleu(&self) -> f64 {
        let m: usize = self.matches.iter().sum();
        let h: usize = self.totals.iter().sum();
        let r: usize = self.ref_totals.iter().sum();
        if h == 0 || r == 0 {
            return 0.0;
        }
        100.0 * (m as f64 / h as f64).min(m as f64 / r as f64)
    }
}

fn corpus_stats<T: Eq + Hash>(
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
    max_n: usize,
) -> Result<NgramStats, MetricError> {
    if hyps.len() != refs.len() {
        return Err(MetricError::CountMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if max_n == 0 {
        return Err(MetricError::ZeroOrder);
    }
    let mut total = NgramStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        total.accumulate(&NgramStats::compute(h, r, max_n));
    }
    Ok(total)
}

/// Corpus BLEU in `[0, 100]`: clipped matches and totals are summed over
/// the corpus before the precisions and brevity penalty are formed.
pub fn corpus_bleu<T: Eq + Hash>(
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
    max_n: usize,
) -> Result<f64, MetricError> {
    Ok(corpus_stats(hyps, refs, max_n)?.bleu())
}

/// Corpus-pooled GLEU in `[0, 100]`.
pub fn corpus_gleu<T: Eq + Hash>(
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
    max_n: usize,
) -> Result<f64, MetricError> {
    Ok(corpus_stats(hyps, refs, max_n)?.gleu())
}
