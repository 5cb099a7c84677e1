//! Hypothesis sampling, the mask-count schedule, joint masking and
//! granularity statistics.
//!
//! Mask positions are 0-based throughout this module.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{TokenId, MASK, UNK};
use crate::model::{class_to_token, DecoderRequest, NatModel, Result, Session};
use crate::tensor::Tensor;

/// One sampled hypothesis with everything needed to rebuild its
/// probability on a gradient tape.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisSample {
    pub length: usize,
    pub tokens: Vec<TokenId>,
    /// `log p(h_t | x)` per position.
    pub token_logprobs: Vec<f64>,
    /// `log p(T | x)` of the sampled length.
    pub length_logprob: f64,
    /// Positions excluded from the co-occurrence probability and masked
    /// for scoring; sorted, each `< length`.
    pub mask: Vec<usize>,
    /// The decoder input the tokens were sampled under.
    pub decoder_input: Vec<TokenId>,
}

impl HypothesisSample {
    /// Log-probability of the length and every unmasked token.
    pub fn cooccurrence_logprob(&self) -> f64 {
        let mut masked = self.mask.iter().peekable();
        let mut total = self.length_logprob;
        for (t, lp) in self.token_logprobs.iter().enumerate() {
            if masked.peek() == Some(&&t) {
                masked.next();
                continue;
            }
            total += lp;
        }
        total
    }

    /// Positions not in the mask.
    pub fn exposed(&self) -> Vec<usize> {
        (0..self.length).filter(|t| self.mask.binary_search(t).is_err()).collect()
    }
}

/// Hypothesis and reference after masking both at the same positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedPair {
    pub hypothesis: Vec<TokenId>,
    pub reference: Vec<TokenId>,
}

/// Index drawn from a categorical distribution given in log space.
pub fn sample_categorical(log_probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, lp) in log_probs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

/// `k` lengths (1-based) drawn from `p(T | x)`.
pub fn draw_lengths(length_log_probs: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..k)
        .map(|_| sample_categorical(length_log_probs, rng) + 1)
        .collect()
}

/// One token per row of a `[T, classes]` log-probability table.
pub fn draw_tokens(rows: &Tensor, rng: &mut ChaCha8Rng) -> (Vec<TokenId>, Vec<f64>) {
    (0..rows.rows())
        .map(|t| {
            let row = rows.row(t);
            let c = sample_categorical(row, rng);
            (class_to_token(c), row[c])
        })
        .unzip()
}

/// `k` hypotheses per source: a length from the length head, then every
/// token independently from its row of one all-`UNK` decode. Samples of
/// equal length share a decode. Masks are left empty.
///
/// `rngs[i]` drives sentence `i`.
pub fn sample_hypotheses(
    model: &NatModel,
    sources: &[&[TokenId]],
    k: usize,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<Vec<HypothesisSample>>> {
    assert_eq!(sources.len(), rngs.len(), "one generator per sentence");
    let mut session = Session::new(model, false);
    let enc = session.encode(sources)?;
    let len_lp_var = session.length_log_probs(&enc)?;
    let len_lp = session.tape.value(len_lp_var).clone();

    let mut lengths = Vec::with_capacity(sources.len());
    let mut requests = Vec::new();
    let mut request_of: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (i, rng) in rngs.iter_mut().enumerate() {
        let ls = draw_lengths(len_lp.row(i), k, rng);
        for &l in &ls {
            request_of.entry((i, l)).or_insert_with(|| {
                requests.push(DecoderRequest {
                    sentence: i,
                    input: vec![UNK; l],
                });
                requests.len() - 1
            });
        }
        lengths.push(ls);
    }
    let dec = session.decode(&enc, &requests)?;
    let all_rows = session.tape.value(dec.log_probs);
    let c = all_rows.last_dim();

    let mut out = Vec::with_capacity(sources.len());
    for (i, (ls, rng)) in lengths.iter().zip(rngs.iter_mut()).enumerate() {
        let mut samples = Vec::with_capacity(k);
        for &l in ls {
            let (start, len) = dec.spans[request_of[&(i, l)]];
            let rows = Tensor::new(vec![len, c], all_rows.data()[start * c..(start + len) * c].to_vec())?;
            let (tokens, token_logprobs) = draw_tokens(&rows, rng);
            samples.push(HypothesisSample {
                length: l,
                tokens,
                token_logprobs,
                length_logprob: len_lp.row(i)[l - 1],
                mask: Vec::new(),
                decoder_input: vec![UNK; l],
            });
        }
        out.push(samples);
    }
    Ok(out)
}

/// Mask count for a given threshold:
/// `clamp(max(floor(T - tau * T), 0), 0, T - 1)`.
pub fn mask_count_for_tau(length: usize, tau: f64) -> usize {
    assert!(length >= 1, "length must be positive");
    let raw = (length as f64 - tau * length as f64).floor().max(0.0);
    (raw as usize).min(length - 1)
}

/// Draws `tau ~ U[0, gamma)` and returns the mask count.
pub fn sample_mask_count(length: usize, gamma: f64, rng: &mut ChaCha8Rng) -> usize {
    assert!(gamma > 0.0, "gamma must be positive");
    let tau = rng.gen::<f64>() * gamma;
    mask_count_for_tau(length, tau)
}

/// `count` distinct positions from `0..length`, sorted.
pub fn sample_mask_positions(length: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut m = index::sample(rng, length, count).into_vec();
    m.sort_unstable();
    m
}

/// Count and positions in one call.
pub fn sample_mask(length: usize, gamma: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = sample_mask_count(length, gamma, rng);
    sample_mask_positions(length, n, rng)
}

/// Replaces positions in `mask` with `<m>` in both sequences; indices
/// beyond a sequence's end are skipped for that sequence.
pub fn apply_joint_mask(hypothesis: &[TokenId], reference: &[TokenId], mask: &[usize]) -> MaskedPair {
    let mask_one = |seq: &[TokenId]| {
        let mut out = seq.to_vec();
        for &m in mask {
            if let Some(slot) = out.get_mut(m) {
                *slot = MASK;
            }
        }
        out
    };
    MaskedPair {
        hypothesis: mask_one(hypothesis),
        reference: mask_one(reference),
    }
}

/// Lengths of the maximal unmasked runs of a length-`length` sequence.
pub fn exposed_runs(length: usize, mask: &[usize]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = 0;
    let mut masked = mask.iter().peekable();
    for t in 0..length {
        if masked.peek() == Some(&&t) {
            masked.next();
            if current > 0 {
                runs.push(current);
            }
            current = 0;
        } else {
            current += 1;
        }
    }
    if current > 0 {
        runs.push(current);
    }
    runs
}

/// Run-length counts with every run of 20 or more in the last bucket.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GranularityHistogram {
    pub counts: [u64; Self::BUCKETS],
}

impl GranularityHistogram {
    pub const BUCKETS: usize = 20;

    pub fn add_run(&mut self, len: usize) {
        debug_assert!(len >= 1);
        self.counts[len.min(Self::BUCKETS) - 1] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Proportion per run length `1..=20`, index `i` for length `i + 1`.
    pub fn proportions(&self) -> Vec<f64> {
        let total = self.total().max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / total).collect()
    }

    /// Proportion of runs of length `>= min_len`.
    pub fn proportion_at_least(&self, min_len: usize) -> f64 {
        let total = self.total().max(1) as f64;
        let start = min_len.clamp(1, Self::BUCKETS) - 1;
        self.counts[start..].iter().sum::<u64>() as f64 / total
    }
}

/// Simulates masking over the corpus: draw `d` uses sentence
/// `lengths[d % lengths.len()]`.
pub fn granularity_histogram(
    lengths: &[usize],
    gamma: f64,
    draws: usize,
    rng: &mut ChaCha8Rng,
) -> GranularityHistogram {
    granularity_histogram_with(lengths, draws, rng, |len, rng| sample_mask_count(len, gamma, rng))
}

/// As [`granularity_histogram`] with a custom mask-count rule.
pub fn granularity_histogram_with(
    lengths: &[usize],
    draws: usize,
    rng: &mut ChaCha8Rng,
    mut count: impl FnMut(usize, &mut ChaCha8Rng) -> usize,
) -> GranularityHistogram {
    let mut hist = GranularityHistogram::default();
    if lengths.is_empty() {
        return hist;
    }
    for d in 0..draws {
        let len = lengths[d % lengths.len()];
        let n = count(len, rng);
        let mask = sample_mask_positions(len, n, rng);
        for run in exposed_runs(len, &mask) {
            hist.add_run(run);
        }
    }
    hist
}
