//! Training losses: token cross-entropy, length, CMLM, plain metric-based
//! optimization (MO) and multi-granularity metric-based optimization (MgMO).
//!
//! Rewards are computed on token strings and enter the tape as constants;
//! gradients reach the model only through the renormalized sample
//! distribution `q`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{TokenId, Vocab, UNK};
use crate::metrics::{score_masked_pair, Metric, MetricError};
use crate::model::{token_to_class, DecoderRequest, ModelError, NatModel, Session};
use crate::rng::{self, tag};
use crate::sampling::{
    apply_joint_mask, draw_tokens, sample_hypotheses, sample_mask, sample_mask_positions,
    HypothesisSample,
};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{rows} log-probability rows for a reference of length {reference}")]
    LengthMismatch { rows: usize, reference: usize },
    #[error("length {length} outside 1..={max}")]
    LengthOutOfRange { length: usize, max: usize },
    #[error("reference position {position} holds reserved token {token}")]
    ReservedTarget { position: usize, token: TokenId },
    #[error("mask subset is empty")]
    EmptySubset,
    #[error("mask position {position} outside a sequence of length {length}")]
    BadPosition { position: usize, length: usize },
    #[error("scoring sentence {sentence}, sample {sample}: {source}")]
    Reward {
        sentence: usize,
        sample: usize,
        source: MetricError,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0} sources but {1} references")]
    BatchMismatch(usize, usize),
}

impl From<TensorError> for ObjectiveError {
    fn from(e: TensorError) -> Self {
        ObjectiveError::Model(ModelError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

/// Decoder input and scoring target construction for finetuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// All-`UNK` input, complete target.
    Nc,
    /// Partially observed input, complete target.
    Pc,
    /// Partially observed input, masked target.
    Pp,
    /// All-`UNK` input, masked target.
    Np,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Nc, Strategy::Pc, Strategy::Pp, Strategy::Np];

    pub fn observes_reference(self) -> bool {
        matches!(self, Strategy::Pc | Strategy::Pp)
    }

    pub fn masks_target(self) -> bool {
        matches!(self, Strategy::Pp | Strategy::Np)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Nc => "nc",
            Strategy::Pc => "pc",
            Strategy::Pp => "pp",
            Strategy::Np => "np",
        })
    }
}

impl FromStr for Strategy {
    type Err = ObjectiveError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('&', "").as_str() {
            "nc" => Ok(Strategy::Nc),
            "pc" => Ok(Strategy::Pc),
            "pp" => Ok(Strategy::Pp),
            "np" => Ok(Strategy::Np),
            _ => Err(ObjectiveError::Config(format!(
                "unknown strategy {s:?} (expected nc, pc, pp or np)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MgmoConfig {
    pub gamma: f64,
    pub k: usize,
    pub alpha: f64,
    pub metric: Metric,
    pub max_ngram: usize,
    pub strategy: Strategy,
    pub seed: u64,
}

impl Default for MgmoConfig {
    fn default() -> Self {
        MgmoConfig {
            gamma: 8.0,
            k: 8,
            alpha: 0.005,
            metric: Metric::Gleu,
            max_ngram: 6,
            strategy: Strategy::Np,
            seed: 0,
        }
    }
}

impl MgmoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(ObjectiveError::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.k == 0 {
            return Err(ObjectiveError::Config("k must be >= 1".into()));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(ObjectiveError::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.max_ngram == 0 {
            return Err(ObjectiveError::Config("max_ngram must be >= 1".into()));
        }
        Ok(())
    }
}

fn classes(reference: &[TokenId]) -> Result<Vec<usize>> {
    reference
        .iter()
        .enumerate()
        .map(|(position, &token)| {
            token_to_class(token).ok_or(ObjectiveError::ReservedTarget { position, token })
        })
        .collect()
}

/// `-sum_t log p(y_t | x)` over a `[T, classes]` table.
pub fn xe_loss(tape: &mut Tape, log_probs: Var, reference: &[TokenId]) -> Result<Var> {
    let rows = tape.value(log_probs).rows();
    if rows != reference.len() {
        return Err(ObjectiveError::LengthMismatch {
            rows,
            reference: reference.len(),
        });
    }
    let picked = tape.gather_last(log_probs, &classes(reference)?)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0))
}

/// `-log p(T | x)` from a length distribution over `1..=max_len`.
pub fn length_loss(tape: &mut Tape, length_log_probs: Var, length: usize) -> Result<Var> {
    let max = tape.value(length_log_probs).last_dim();
    if length == 0 || length > max {
        return Err(ObjectiveError::LengthOutOfRange { length, max });
    }
    let row = tape.reshape(length_log_probs, vec![1, max])?;
    let picked = tape.gather_last(row, &[length - 1])?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0))
}

/// Mean length loss over a batch, `[S, max_len]` rows.
fn batch_length_loss(tape: &mut Tape, length_log_probs: Var, lengths: &[usize]) -> Result<Var> {
    let max = tape.value(length_log_probs).last_dim();
    let idx = lengths
        .iter()
        .map(|&l| {
            if l == 0 || l > max {
                Err(ObjectiveError::LengthOutOfRange { length: l, max })
            } else {
                Ok(l - 1)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let picked = tape.gather_last(length_log_probs, &idx)?;
    let m = tape.mean(picked)?;
    Ok(tape.scale(m, -1.0))
}

/// The subset size is uniform over `1..=T`, positions uniform without
/// replacement.
pub fn sample_cmlm_subset(length: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = rng.gen_range(1..=length);
    sample_mask_positions(length, n, rng)
}

/// Decoder input for CMLM: the reference with `subset` replaced by `UNK`.
pub fn cmlm_input(reference: &[TokenId], subset: &[usize]) -> Result<Vec<TokenId>> {
    if subset.is_empty() {
        return Err(ObjectiveError::EmptySubset);
    }
    let mut input = reference.to_vec();
    for &p in subset {
        *input.get_mut(p).ok_or(ObjectiveError::BadPosition {
            position: p,
            length: reference.len(),
        })? = UNK;
    }
    Ok(input)
}

/// A loss split into its metric or token part and the length part.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub objective: Var,
    pub length: Var,
    pub total: Var,
}

impl BatchLoss {
    fn new(tape: &mut Tape, objective: Var, length: Var) -> Result<Self> {
        let total = tape.add(objective, length)?;
        Ok(BatchLoss {
            objective,
            length,
            total,
        })
    }
}

/// Masked-token negative log-likelihood of one sentence, summed over
/// `subset` only.
pub fn cmlm_loss(
    session: &mut Session<'_>,
    source: &[TokenId],
    reference: &[TokenId],
    subset: &[usize],
) -> Result<Var> {
    Ok(cmlm_batch_loss(session, &[source], &[reference], &[subset.to_vec()], 0.0)?.objective)
}

/// Mean over sentences of the masked-token loss, plus the mean length loss.
///
/// With `label_smoothing = e` each masked term is
/// `-(1 - e) log p(y_t) - e * mean_c log p(c)`.
pub fn cmlm_batch_loss(
    session: &mut Session<'_>,
    sources: &[&[TokenId]],
    references: &[&[TokenId]],
    subsets: &[Vec<usize>],
    label_smoothing: f64,
) -> Result<BatchLoss> {
    if sources.len() != references.len() || subsets.len() != references.len() {
        return Err(ObjectiveError::BatchMismatch(sources.len(), references.len()));
    }
    let enc = session.encode(sources)?;
    let len_lp = session.length_log_probs(&enc)?;
    let mut requests = Vec::with_capacity(sources.len());
    for (i, (r, subset)) in references.iter().zip(subsets).enumerate() {
        requests.push(DecoderRequest {
            sentence: i,
            input: cmlm_input(r, subset)?,
        });
    }
    let dec = session.decode(&enc, &requests)?;
    let mut rows = Vec::new();
    let mut cls = Vec::new();
    for ((r, subset), &(start, _)) in references.iter().zip(subsets).zip(&dec.spans) {
        let c = classes(r)?;
        for &p in subset {
            rows.push(start + p);
            cls.push(c[p]);
        }
    }
    let s = sources.len() as f64;
    let tape = &mut session.tape;
    let selected = tape.select_rows(dec.log_probs, &rows)?;
    let picked = tape.gather_last(selected, &cls)?;
    let nll = tape.sum(picked);
    let mut objective = tape.scale(nll, -(1.0 - label_smoothing) / s);
    if label_smoothing > 0.0 {
        let n_classes = tape.value(selected).last_dim() as f64;
        let all = tape.sum(selected);
        let smooth = tape.scale(all, -label_smoothing / (n_classes * s));
        objective = tape.add(objective, smooth)?;
    }
    let lengths: Vec<usize> = references.iter().map(|r| r.len()).collect();
    let length = batch_length_loss(tape, len_lp, &lengths)?;
    BatchLoss::new(tape, objective, length)
}

/// `q_k = exp(alpha l_k) / sum_j exp(alpha l_j)`, computed with the
/// maximum subtracted.
pub fn q_distribution(logprobs: &[f64], alpha: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logprobs.iter().map(|l| alpha * l).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `log p(T^k | x) + sum over unmasked t of log p(h_t^k | x)`.
pub fn segment_cooccurrence_logprob(sample: &HypothesisSample) -> f64 {
    sample.cooccurrence_logprob()
}

/// Decoder input, scoring target and mask for one reference.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StrategyBatch {
    pub decoder_input: Vec<TokenId>,
    pub scoring_target: Vec<TokenId>,
    /// The sampled position set, sorted and 0-based. Observed strategies
    /// reveal the reference here; masking strategies mask the target here.
    pub mask: Vec<usize>,
}

pub fn build_strategy_batch_with_mask(
    reference: &[TokenId],
    strategy: Strategy,
    mask: &[usize],
) -> StrategyBatch {
    let mut decoder_input = vec![UNK; reference.len()];
    if strategy.observes_reference() {
        for &m in mask {
            if let Some(slot) = decoder_input.get_mut(m) {
                *slot = reference[m];
            }
        }
    }
    let scoring_target = if strategy.masks_target() {
        apply_joint_mask(&[], reference, mask).reference
    } else {
        reference.to_vec()
    };
    StrategyBatch {
        decoder_input,
        scoring_target,
        mask: mask.to_vec(),
    }
}

/// Draws the position set with the mask-count schedule at `gamma`.
pub fn build_strategy_batch(
    reference: &[TokenId],
    strategy: Strategy,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> StrategyBatch {
    let mask = sample_mask(reference.len(), gamma, rng);
    build_strategy_batch_with_mask(reference, strategy, &mask)
}

/// Frozen samples of one sentence with their detached rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceSamples {
    pub samples: Vec<HypothesisSample>,
    pub rewards: Vec<f64>,
}

fn streams(seed: u64, step: u64, n: usize, purpose: u64) -> Vec<ChaCha8Rng> {
    (0..n as u64)
        .map(|i| rng::stream(seed, &[purpose, step, i]))
        .collect()
}

/// Draws `k` hypotheses per sentence under `cfg.strategy`, masks them and
/// scores the masked pairs. Hypothesis tokens and masks use separate
/// generator streams derived from `(cfg.seed, step, sentence)`, so a
/// masking strategy whose masks come out empty reproduces the unmasked
/// samples exactly.
pub fn sample_phase(
    model: &NatModel,
    sources: &[&[TokenId]],
    references: &[&[TokenId]],
    cfg: &MgmoConfig,
    vocab: &Vocab,
    step: u64,
) -> Result<Vec<SentenceSamples>> {
    cfg.validate()?;
    if sources.len() != references.len() {
        return Err(ObjectiveError::BatchMismatch(sources.len(), references.len()));
    }
    let mut hyp_rngs = streams(cfg.seed, step, sources.len(), tag::HYPOTHESES);
    let mut mask_rngs = streams(cfg.seed, step, sources.len(), tag::REWARD_MASK);
    let mut drawn = if cfg.strategy.observes_reference() {
        sample_observed(model, sources, references, cfg, &mut hyp_rngs, &mut mask_rngs)?
    } else {
        let mut drawn = sample_hypotheses(model, sources, cfg.k, &mut hyp_rngs)?;
        if cfg.strategy.masks_target() {
            for (samples, rng) in drawn.iter_mut().zip(&mut mask_rngs) {
                for s in samples {
                    s.mask = sample_mask(s.length, cfg.gamma, rng);
                }
            }
        }
        drawn
    };
    let mut out = Vec::with_capacity(drawn.len());
    for (i, (samples, reference)) in drawn.drain(..).zip(references).enumerate() {
        let rewards = samples
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let pair = apply_joint_mask(&s.tokens, reference, &s.mask);
                score_masked_pair(&pair, cfg.metric, cfg.max_ngram, vocab)
                    .map(|r| r.value())
                    .map_err(|source| ObjectiveError::Reward {
                        sentence: i,
                        sample: k,
                        source,
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(SentenceSamples { samples, rewards });
    }
    Ok(out)
}

/// Observed strategies: the hypothesis length is the reference length and
/// each sample decodes from its own partially revealed input.
fn sample_observed(
    model: &NatModel,
    sources: &[&[TokenId]],
    references: &[&[TokenId]],
    cfg: &MgmoConfig,
    hyp_rngs: &mut [ChaCha8Rng],
    mask_rngs: &mut [ChaCha8Rng],
) -> Result<Vec<Vec<HypothesisSample>>> {
    let mut session = Session::new(model, false);
    let enc = session.encode(sources)?;
    let len_lp_var = session.length_log_probs(&enc)?;
    let len_lp = session.tape.value(len_lp_var).clone();
    let max = len_lp.last_dim();
    let mut plans = Vec::new();
    let mut requests = Vec::new();
    let mut request_of: HashMap<(usize, Vec<TokenId>), usize> = HashMap::new();
    for (i, (reference, rng)) in references.iter().zip(mask_rngs.iter_mut()).enumerate() {
        if reference.is_empty() || reference.len() > max {
            return Err(ObjectiveError::LengthOutOfRange {
                length: reference.len(),
                max,
            });
        }
        for _ in 0..cfg.k {
            let batch = build_strategy_batch(reference, cfg.strategy, cfg.gamma, rng);
            let r = *request_of
                .entry((i, batch.decoder_input.clone()))
                .or_insert_with(|| {
                    requests.push(DecoderRequest {
                        sentence: i,
                        input: batch.decoder_input.clone(),
                    });
                    requests.len() - 1
                });
            plans.push((i, r, batch));
        }
    }
    let dec = session.decode(&enc, &requests)?;
    let rows = session.tape.value(dec.log_probs);
    let c = rows.last_dim();
    let mut out: Vec<Vec<HypothesisSample>> = vec![Vec::with_capacity(cfg.k); sources.len()];
    for (i, r, batch) in plans {
        let (start, len) = dec.spans[r];
        let table = Tensor::new(vec![len, c], rows.data()[start * c..(start + len) * c].to_vec())?;
        let (tokens, token_logprobs) = draw_tokens(&table, &mut hyp_rngs[i]);
        let mask = if cfg.strategy.masks_target() {
            batch.mask
        } else {
            Vec::new()
        };
        out[i].push(HypothesisSample {
            length: len,
            tokens,
            token_logprobs,
            length_logprob: len_lp.row(i)[len - 1],
            mask,
            decoder_input: batch.decoder_input,
        });
    }
    Ok(out)
}

/// Rebuilds the MgMO loss on the session's tape from frozen samples:
/// `-mean_s sum_k q_k R_k` with `q = softmax(alpha * l)` over the
/// co-occurrence log-probabilities `l`, plus the mean length loss.
pub fn mgmo_batch_loss(
    session: &mut Session<'_>,
    sources: &[&[TokenId]],
    references: &[&[TokenId]],
    samples: &[SentenceSamples],
    alpha: f64,
) -> Result<BatchLoss> {
    if sources.len() != references.len() || samples.len() != sources.len() {
        return Err(ObjectiveError::BatchMismatch(sources.len(), references.len()));
    }
    let k = samples.first().map_or(0, |s| s.samples.len());
    if k == 0 || samples.iter().any(|s| s.samples.len() != k || s.rewards.len() != k) {
        return Err(ObjectiveError::Config(
            "every sentence needs the same nonzero number of samples and rewards".into(),
        ));
    }
    let enc = session.encode(sources)?;
    let len_lp = session.length_log_probs(&enc)?;

    let mut requests = Vec::new();
    let mut request_of: HashMap<(usize, &[TokenId]), usize> = HashMap::new();
    let mut sample_request = Vec::with_capacity(samples.len() * k);
    for (i, sentence) in samples.iter().enumerate() {
        for s in &sentence.samples {
            let r = *request_of
                .entry((i, s.decoder_input.as_slice()))
                .or_insert_with(|| {
                    requests.push(DecoderRequest {
                        sentence: i,
                        input: s.decoder_input.clone(),
                    });
                    requests.len() - 1
                });
            sample_request.push(r);
        }
    }
    let dec = session.decode(&enc, &requests)?;

    let mut rows = Vec::new();
    let mut cls = Vec::new();
    let mut seg = Vec::with_capacity(sample_request.len());
    let mut len_rows = Vec::with_capacity(sample_request.len());
    let mut len_idx = Vec::with_capacity(sample_request.len());
    let mut rewards = Vec::with_capacity(sample_request.len());
    let flat = samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.samples.iter().zip(&s.rewards).map(move |p| (i, p)));
    for ((i, (s, &reward)), &r) in flat.zip(&sample_request) {
        let start = dec.spans[r].0;
        let c = classes(&s.tokens)?;
        let exposed = s.exposed();
        for &t in &exposed {
            rows.push(start + t);
            cls.push(c[t]);
        }
        seg.push(exposed.len());
        len_rows.push(i);
        len_idx.push(s.length - 1);
        rewards.push(reward);
    }

    let s_count = samples.len();
    let tape = &mut session.tape;
    let selected = tape.select_rows(dec.log_probs, &rows)?;
    let token_lp = tape.gather_last(selected, &cls)?;
    let token_sum = tape.segment_sum(token_lp, &seg)?;
    let len_sel = tape.select_rows(len_lp, &len_rows)?;
    let len_term = tape.gather_last(len_sel, &len_idx)?;
    let ell = tape.add(token_sum, len_term)?;
    let scaled = tape.scale(ell, alpha);
    let grid = tape.reshape(scaled, vec![s_count, k])?;
    let log_q = tape.log_softmax(grid);
    let q = tape.exp(log_q);
    let r = tape.constant(Tensor::new(vec![s_count, k], rewards)?);
    let weighted = tape.mul(q, r)?;
    let total = tape.sum(weighted);
    let objective = tape.scale(total, -1.0 / s_count as f64);
    let lengths: Vec<usize> = references.iter().map(|r| r.len()).collect();
    let length = batch_length_loss(tape, len_lp, &lengths)?;
    BatchLoss::new(tape, objective, length)
}

/// Unmasked samples and rewards for the MO baseline. Uses the same
/// hypothesis streams as [`sample_phase`].
pub fn mo_sample_phase(
    model: &NatModel,
    sources: &[&[TokenId]],
    references: &[&[TokenId]],
    cfg: &MgmoConfig,
    vocab: &Vocab,
    step: u64,
) -> Result<Vec<SentenceSamples>> {
    cfg.validate()?;
    let mut hyp_rngs = streams(cfg.seed, step, sources.len(), tag::HYPOTHESES);
    let drawn = sample_hypotheses(model, sources, cfg.k, &mut hyp_rngs)?;
    drawn
        .into_iter()
        .zip(references)
        .enumerate()
        .map(|(i, (samples, reference))| {
            let rewards = samples
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    cfg.metric
                        .score(&s.tokens, reference, cfg.max_ngram, vocab)
                        .map(|r| r.value())
                        .map_err(|source| ObjectiveError::Reward {
                            sentence: i,
                            sample: k,
                            source,
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SentenceSamples { samples, rewards })
        })
        .collect()
}

/// MO loss over full-sequence probabilities
/// `p(T^k | x) prod_t p(h_t^k | x)`, built sentence by sentence with one
/// decode per sample. Masks on the samples are ignored.
pub fn mo_batch_loss(
    session: &mut Session<'_>,
    sources: &[&[TokenId]],
    references: &[&[TokenId]],
    samples: &[SentenceSamples],
    alpha: f64,
) -> Result<BatchLoss> {
    if sources.len() != references.len() || samples.len() != sources.len() {
        return Err(ObjectiveError::BatchMismatch(sources.len(), references.len()));
    }
    let enc = session.encode(sources)?;
    let len_lp = session.length_log_probs(&enc)?;
    let requests: Vec<DecoderRequest> = samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.samples.iter().map(move |h| DecoderRequest {
                sentence: i,
                input: vec![UNK; h.length],
            })
        })
        .collect();
    let dec = session.decode(&enc, &requests)?;
    let mut spans = dec.spans.iter();
    let mut per_sentence = Vec::with_capacity(samples.len());
    for (i, sentence) in samples.iter().enumerate() {
        let tape = &mut session.tape;
        let lrow = tape.select_rows(len_lp, &[i])?;
        let mut logps = Vec::with_capacity(sentence.samples.len());
        for h in &sentence.samples {
            let &(start, len) = spans.next().expect("one span per sample");
            let rows: Vec<usize> = (start..start + len).collect();
            let table = tape.select_rows(dec.log_probs, &rows)?;
            let picked = tape.gather_last(table, &classes(&h.tokens)?)?;
            let tokens = tape.sum(picked);
            let lpick = tape.gather_last(lrow, &[h.length - 1])?;
            let lterm = tape.sum(lpick);
            logps.push(tape.add(tokens, lterm)?);
        }
        let l = tape.concat(&logps)?;
        let scaled = tape.scale(l, alpha);
        let q = tape.softmax(scaled);
        let r = tape.constant(Tensor::vector(sentence.rewards.clone()));
        let weighted = tape.mul(q, r)?;
        per_sentence.push(tape.sum(weighted));
    }
    let tape = &mut session.tape;
    let all = tape.concat(&per_sentence)?;
    let m = tape.mean(all)?;
    let objective = tape.scale(m, -1.0);
    let lengths: Vec<usize> = references.iter().map(|r| r.len()).collect();
    let length = batch_length_loss(tape, len_lp, &lengths)?;
    BatchLoss::new(tape, objective, length)
}

/// Single-sentence MgMO loss value: sample, score and evaluate.
pub fn mgmo_loss(
    model: &NatModel,
    source: &[TokenId],
    reference: &[TokenId],
    cfg: &MgmoConfig,
    vocab: &Vocab,
    step: u64,
) -> Result<f64> {
    let samples = sample_phase(model, &[source], &[reference], cfg, vocab, step)?;
    let mut session = Session::new(model, false);
    let loss = mgmo_batch_loss(&mut session, &[source], &[reference], &samples, cfg.alpha)?;
    Ok(session.tape.value(loss.objective).item()?)
}

/// Single-sentence MO loss value.
pub fn mo_loss(
    model: &NatModel,
    source: &[TokenId],
    reference: &[TokenId],
    cfg: &MgmoConfig,
    vocab: &Vocab,
    step: u64,
) -> Result<f64> {
    let samples = mo_sample_phase(model, &[source], &[reference], cfg, vocab, step)?;
    let mut session = Session::new(model, false);
    let loss = mo_batch_loss(&mut session, &[source], &[reference], &samples, cfg.alpha)?;
    Ok(session.tape.value(loss.objective).item()?)
}
