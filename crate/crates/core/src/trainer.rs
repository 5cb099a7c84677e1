//! Two-stage training, evaluation and analysis.
//!
//! Stage one minimizes the CMLM loss plus the length loss under a warmup and
//! exponential-anneal schedule. Stage two starts from a stage-one model and
//! minimizes the MgMO (or MO) loss plus the length loss at a fixed rate, with
//! the length head reading detached encoder states.
//! Both keep the model with the best validation corpus BLEU, decoded with
//! length reranking; ties keep the earlier model.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::{Objective, Stage, TrainConfig};
use crate::data::{Batcher, ParallelCorpus, TokenId, Vocab, UNK};
use crate::metrics::{corpus_bleu, corpus_gleu, MetricError};
use crate::model::{DecoderRequest, ModelConfig, ModelError, NatModel, Session};
use crate::objectives::{
    cmlm_batch_loss, mgmo_batch_loss, mo_batch_loss, mo_sample_phase, sample_cmlm_subset,
    sample_phase, ObjectiveError,
};
use crate::optim::Adam;
use crate::rng::{self, tag};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("loss became non-finite ({loss}) at step {step}")]
    Diverged { step: u64, loss: f64 },
    #[error("{0}")]
    Invalid(String),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// One metrics-log row. Step 0 is the untouched initial model.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    /// Total loss of the update that produced this step.
    pub train_loss: Option<f64>,
    /// The objective part of the loss, without the length term.
    pub objective_loss: Option<f64>,
    pub valid_bleu: Option<f64>,
}

pub fn format_log(rows: &[LogRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.10}"));
    let mut s = String::from("step\ttrain_loss\tvalid_bleu\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{}\t{}", r.step, fmt(r.train_loss), fmt(r.valid_bleu));
    }
    s
}

pub struct TrainOutcome {
    pub best: NatModel,
    pub best_step: u64,
    pub best_bleu: f64,
    pub last: NatModel,
    pub log: Vec<LogRow>,
}

/// Corpora and vocabulary shared by both stages.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a ParallelCorpus,
    pub valid: &'a ParallelCorpus,
    pub vocab: &'a Vocab,
}

pub fn model_config(cfg: &TrainConfig, vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        d_model: cfg.d_model,
        n_heads: cfg.n_heads,
        n_layers: cfg.n_layers,
        max_len: cfg.max_len,
    }
}

struct Tracker<'a> {
    cfg: &'a TrainConfig,
    data: TrainData<'a>,
    out_dir: Option<&'a Path>,
    log: Vec<LogRow>,
    best: Option<(NatModel, u64, f64)>,
}

impl<'a> Tracker<'a> {
    fn new(cfg: &'a TrainConfig, data: TrainData<'a>, out_dir: Option<&'a Path>) -> Result<Self> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|source| TrainError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
            write_file(&dir.join("config.txt"), cfg.to_string().as_bytes())?;
        }
        Ok(Tracker {
            cfg,
            data,
            out_dir,
            log: Vec::new(),
            best: None,
        })
    }

    fn record(&mut self, model: &NatModel, step: u64, loss: Option<(f64, f64)>) -> Result<()> {
        let due = step == 0 || step % self.cfg.valid_interval == 0 || step == self.cfg.steps;
        let valid_bleu = if due {
            let b = evaluate(model, self.data.valid, self.cfg.candidates)?.bleu;
            info!("step {step}: valid BLEU {b:.2}");
            if self.best.as_ref().map_or(true, |(_, _, best)| b > *best) {
                self.best = Some((model.clone(), step, b));
                if let Some(dir) = self.out_dir {
                    checkpoint::save(model, &dir.join("best.ckpt"))?;
                }
            }
            Some(b)
        } else {
            None
        };
        self.log.push(LogRow {
            step,
            train_loss: loss.map(|l| l.0),
            objective_loss: loss.map(|l| l.1),
            valid_bleu,
        });
        Ok(())
    }

    fn finish(self, last: NatModel) -> Result<TrainOutcome> {
        if let Some(dir) = self.out_dir {
            checkpoint::save(&last, &dir.join("last.ckpt"))?;
            write_file(&dir.join("metrics.tsv"), format_log(&self.log).as_bytes())?;
        }
        let (best, best_step, best_bleu) = self.best.expect("step 0 is always validated");
        Ok(TrainOutcome {
            best,
            best_step,
            best_bleu,
            last,
            log: self.log,
        })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn check_finite(step: u64, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Diverged { step, loss })
    }
}

/// CMLM pretraining. With an `out_dir`, writes `config.txt`, `best.ckpt`,
/// `last.ckpt` and `metrics.tsv` there.
pub fn train_cmlm(
    mut model: NatModel,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    validate_stage(cfg, Stage::Cmlm)?;
    let mut tracker = Tracker::new(cfg, data, out_dir)?;
    tracker.record(&model, 0, None)?;
    let schedule = cfg.schedule();
    let mut adam = Adam::new(model.params(), cfg.weight_decay);
    let mut batches = Batcher::new(
        data.train,
        cfg.batch_tokens,
        rng::stream(cfg.seed, &[tag::BATCHES]),
    );
    for step in 1..=cfg.steps {
        let batch = batches.next().expect("batcher is infinite");
        let pairs: Vec<_> = batch.indices.iter().map(|&i| &data.train.pairs[i]).collect();
        let sources: Vec<&[TokenId]> = pairs.iter().map(|p| p.source.as_slice()).collect();
        let targets: Vec<&[TokenId]> = pairs.iter().map(|p| p.target.as_slice()).collect();
        let mut mask_rng = rng::stream(cfg.seed, &[tag::CMLM_MASK, step]);
        let subsets: Vec<Vec<usize>> = targets
            .iter()
            .map(|t| sample_cmlm_subset(t.len(), &mut mask_rng))
            .collect();
        let (grads, total, objective) = {
            let mut session = Session::with_dropout(
                &model,
                cfg.dropout,
                rng::stream(cfg.seed, &[tag::DROPOUT, step]),
            );
            let loss = cmlm_batch_loss(&mut session, &sources, &targets, &subsets, cfg.label_smoothing)?;
            let total = session.tape.value(loss.total).item()?;
            let objective = session.tape.value(loss.objective).item()?;
            check_finite(step, total)?;
            let g = session.tape.backward(loss.total)?;
            (session.param_grads(&g), total, objective)
        };
        adam.step(model.params_mut(), &grads, schedule.at(step - 1));
        tracker.record(&model, step, Some((total, objective)))?;
    }
    tracker.finish(model)
}

/// Sentence batches of a fixed size over per-epoch shuffles.
struct SentenceBatches {
    n: usize,
    size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl SentenceBatches {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        SentenceBatches {
            n,
            size: size.min(n),
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: n,
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.size > self.order.len() {
            self.order = (0..self.n).collect();
            self.order
                .shuffle(&mut rng::stream(self.seed, &[tag::BATCHES, self.epoch]));
            self.epoch += 1;
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        b
    }
}

/// Metric-based finetuning from an initialized model.
pub fn finetune_mgmo(
    mut model: NatModel,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    validate_stage(cfg, Stage::Mgmo)?;
    if data.train.is_empty() {
        return Err(TrainError::Invalid("empty training corpus".into()));
    }
    let mut tracker = Tracker::new(cfg, data, out_dir)?;
    tracker.record(&model, 0, None)?;
    let schedule = cfg.schedule();
    let mut adam = Adam::new(model.params(), cfg.weight_decay);
    let mut batches = SentenceBatches::new(data.train.len(), cfg.batch_sentences, cfg.seed);
    for step in 1..=cfg.steps {
        let idx = batches.next_batch();
        let sources: Vec<&[TokenId]> = idx.iter().map(|&i| data.train.pairs[i].source.as_slice()).collect();
        let targets: Vec<&[TokenId]> = idx.iter().map(|&i| data.train.pairs[i].target.as_slice()).collect();
        let samples = match cfg.objective {
            Objective::Mgmo => sample_phase(&model, &sources, &targets, &cfg.mgmo, data.vocab, step)?,
            Objective::Mo => mo_sample_phase(&model, &sources, &targets, &cfg.mgmo, data.vocab, step)?,
        };
        let (grads, total, objective) = {
            // The sequence objective scales with alpha while the length loss
            // does not; letting the latter reach the encoder would dominate
            // its Adam-normalized updates.
            let mut session = Session::with_dropout(
                &model,
                cfg.dropout,
                rng::stream(cfg.seed, &[tag::DROPOUT, step]),
            )
            .detach_length_head();
            let loss = match cfg.objective {
                Objective::Mgmo => mgmo_batch_loss(&mut session, &sources, &targets, &samples, cfg.mgmo.alpha)?,
                Objective::Mo => mo_batch_loss(&mut session, &sources, &targets, &samples, cfg.mgmo.alpha)?,
            };
            let total = session.tape.value(loss.total).item()?;
            let objective = session.tape.value(loss.objective).item()?;
            check_finite(step, total)?;
            let g = session.tape.backward(loss.total)?;
            (session.param_grads(&g), total, objective)
        };
        adam.step(model.params_mut(), &grads, schedule.at(step - 1));
        tracker.record(&model, step, Some((total, objective)))?;
    }
    tracker.finish(model)
}

fn validate_stage(cfg: &TrainConfig, stage: Stage) -> Result<()> {
    if cfg.stage != stage {
        return Err(TrainError::Invalid(format!(
            "configuration is for stage {}, not {stage}",
            cfg.stage
        )));
    }
    cfg.validate().map_err(|e| TrainError::Invalid(e.to_string()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Corpus BLEU-4 in `[0, 100]`.
    pub bleu: f64,
    /// Corpus GLEU-4 in `[0, 100]`.
    pub gleu: f64,
    pub mean_length: f64,
    pub hypotheses: Vec<Vec<TokenId>>,
}

pub fn decode_corpus(model: &NatModel, sources: &[Vec<TokenId>], candidates: usize) -> Result<Vec<Vec<TokenId>>> {
    let refs: Vec<&[TokenId]> = sources.iter().map(Vec::as_slice).collect();
    Ok(model.greedy_decode_batch(&refs, candidates)?)
}

pub fn evaluate(model: &NatModel, corpus: &ParallelCorpus, candidates: usize) -> Result<EvalReport> {
    let hypotheses = decode_corpus(model, &corpus.sources(), candidates)?;
    let refs = corpus.targets();
    let mean_length = if hypotheses.is_empty() {
        0.0
    } else {
        hypotheses.iter().map(Vec::len).sum::<usize>() as f64 / hypotheses.len() as f64
    };
    Ok(EvalReport {
        bleu: corpus_bleu(&hypotheses, &refs, 4)?,
        gleu: corpus_gleu(&hypotheses, &refs, 4)?,
        mean_length,
        hypotheses,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LengthBucket {
    /// Inclusive lower bound on the reference length.
    pub lo: usize,
    /// Exclusive upper bound; `None` for the last bucket.
    pub hi: Option<usize>,
    pub count: usize,
    /// `None` when the bucket is empty.
    pub bleu: Option<f64>,
}

/// Corpus BLEU per reference-length bucket `[edges[i], edges[i + 1])`, the
/// last bucket open-ended. Lengths below `edges[0]` are not counted.
pub fn analyze_lengths(
    model: &NatModel,
    corpus: &ParallelCorpus,
    edges: &[usize],
    candidates: usize,
) -> Result<Vec<LengthBucket>> {
    if edges.is_empty() || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(TrainError::Invalid(format!(
            "bucket edges {edges:?} must be nonempty and strictly increasing"
        )));
    }
    let hyps = decode_corpus(model, &corpus.sources(), candidates)?;
    Ok(bucket_bleu(&hyps, &corpus.targets(), edges)?)
}

/// Bucketed corpus BLEU of already decoded hypotheses.
pub fn bucket_bleu(
    hyps: &[Vec<TokenId>],
    refs: &[Vec<TokenId>],
    edges: &[usize],
) -> std::result::Result<Vec<LengthBucket>, MetricError> {
    let mut out = Vec::with_capacity(edges.len());
    for (i, &lo) in edges.iter().enumerate() {
        let hi = edges.get(i + 1).copied();
        let (h, r): (Vec<_>, Vec<_>) = hyps
            .iter()
            .zip(refs)
            .filter(|(_, r)| r.len() >= lo && hi.map_or(true, |h| r.len() < h))
            .map(|(h, r)| (h.clone(), r.clone()))
            .unzip();
        let bleu = if h.is_empty() {
            None
        } else {
            Some(corpus_bleu(&h, &r, 4)?)
        };
        out.push(LengthBucket {
            lo,
            hi,
            count: h.len(),
            bleu,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfidenceReport {
    pub mean_argmax_prob: f64,
    /// `1 - mean_argmax_prob`.
    pub ncm_proxy: f64,
    pub positions: usize,
}

/// Decodes every source at its gold target length from all-`UNK` input and
/// averages the probability of each position's argmax token.
pub fn confidence_stats(model: &NatModel, corpus: &ParallelCorpus) -> Result<ConfidenceReport> {
    let mut total = 0.0;
    let mut positions = 0;
    for chunk in corpus.pairs.chunks(64) {
        let sources: Vec<&[TokenId]> = chunk.iter().map(|p| p.source.as_slice()).collect();
        let mut s = Session::new(model, false);
        let enc = s.encode(&sources)?;
        let requests: Vec<DecoderRequest> = chunk
            .iter()
            .enumerate()
            .map(|(i, p)| DecoderRequest {
                sentence: i,
                input: vec![UNK; p.target.len()],
            })
            .collect();
        let dec = s.decode(&enc, &requests)?;
        let rows = s.tape.value(dec.log_probs);
        for r in 0..rows.rows() {
            let max = rows.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            total += max.exp();
            positions += 1;
        }
    }
    if positions == 0 {
        return Err(TrainError::Invalid("empty corpus".into()));
    }
    let mean = total / positions as f64;
    Ok(ConfidenceReport {
        mean_argmax_prob: mean,
        ncm_proxy: 1.0 - mean,
        positions,
    })
}

/// Fraction of positions `t > 1` whose token equals the previous one.
pub fn repetition_rate<T: PartialEq>(hypotheses: &[Vec<T>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(TrainError::Invalid("no hypotheses".into()));
    }
    let (mut repeats, mut total) = (0usize, 0usize);
    for h in hypotheses {
        for w in h.windows(2) {
            total += 1;
            repeats += usize::from(w[0] == w[1]);
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        repeats as f64 / total as f64
    })
}
