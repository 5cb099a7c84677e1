use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use mgmo::checkpoint;
use mgmo::config::{Stage, TrainConfig};
use mgmo::data::{gen_mapping_task, gen_multimodal_task, load_tsv, save_tsv, ParallelCorpus, TokenId, Vocab};
use mgmo::metrics::{corpus_bleu, corpus_gleu, Metric};
use mgmo::model::NatModel;
use mgmo::sampling::{granularity_histogram, GranularityHistogram};
use mgmo::trainer::{
    analyze_lengths, confidence_stats, decode_corpus, finetune_mgmo, model_config, repetition_rate,
    train_cmlm, TrainData, TrainOutcome,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Non-autoregressive translation with CMLM pretraining and MgMO finetuning.
#[derive(Parser)]
#[command(name = "mgmo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task as train/valid/test TSV files plus a vocabulary.
    GenData(GenData),
    /// Pretrain with the CMLM objective.
    TrainCmlm(Train),
    /// Finetune a pretrained checkpoint with MgMO (or the MO baseline).
    FinetuneMgmo(Finetune),
    /// Decode a source file, one whitespace-tokenized sentence per line.
    Decode(Decode),
    /// Score hypotheses against references line by line.
    Score(Score),
    #[command(subcommand)]
    Analyze(Analyze),
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskKind {
    Mapping,
    Multimodal,
}

#[derive(Args)]
struct GenData {
    #[arg(long, value_enum)]
    task: TaskKind,
    /// Output directory for train.tsv, valid.tsv, test.tsv and vocab.txt.
    #[arg(long)]
    out: PathBuf,
    /// Content tokens, excluding the reserved symbols.
    #[arg(long, default_value_t = 64)]
    vocab_size: usize,
    /// Train, valid and test sizes.
    #[arg(long, value_delimiter = ',', default_values_t = [10_000, 1_000, 1_000])]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 12)]
    max_len: usize,
    /// Mapping task only: share of source tokens that map to two target tokens.
    #[arg(long, default_value_t = 0.1)]
    expand_prob: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct Corpora {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// key=value configuration file; desk defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory for config.txt, metrics.tsv, best.ckpt and last.ckpt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    corpora: Corpora,
}

#[derive(Args)]
struct Finetune {
    /// Stage-one checkpoint to start from.
    #[arg(long)]
    init: PathBuf,
    #[command(flatten)]
    corpora: Corpora,
}

#[derive(Args)]
struct Decode {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Length candidates to rerank.
    #[arg(long, default_value_t = 5)]
    candidates: usize,
}

#[derive(Args)]
struct Score {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, default_value = "gleu")]
    metric: Metric,
    #[arg(long, default_value_t = 4)]
    max_ngram: usize,
}

#[derive(Subcommand)]
enum Analyze {
    /// Corpus BLEU per reference-length bucket.
    Lengths {
        #[command(flatten)]
        model: ModelOnData,
        /// Bucket lower edges; each bucket runs to the next edge.
        #[arg(long, value_delimiter = ',', default_values_t = [3, 6, 9])]
        edges: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        candidates: usize,
    },
    /// Proportions of exposed run lengths under the mask-count schedule.
    Granularity {
        /// TSV corpus whose target lengths drive the simulation.
        #[arg(long, conflicts_with = "length")]
        data: Option<PathBuf>,
        #[arg(long, requires = "data")]
        vocab: Option<PathBuf>,
        /// A single sentence length instead of a corpus.
        #[arg(long)]
        length: Option<usize>,
        #[arg(long, default_value_t = 8.0)]
        gamma: f64,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Mean argmax probability at gold lengths and the multimodality proxy.
    Confidence {
        #[command(flatten)]
        model: ModelOnData,
    },
    /// Share of adjacent identical tokens in a hypothesis file.
    Repetition {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Args)]
struct ModelOnData {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// TSV corpus of source/target pairs.
    #[arg(long)]
    data: PathBuf,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData(a) => gen_data(a),
        Command::TrainCmlm(a) => train(a),
        Command::FinetuneMgmo(a) => finetune(a),
        Command::Decode(a) => decode(a),
        Command::Score(a) => score(a),
        Command::Analyze(a) => analyze(a),
    }
}

fn gen_data(a: GenData) -> Result<()> {
    ensure!(a.sizes.len() == 3, "--sizes takes train,valid,test");
    let total = a.sizes.iter().sum();
    let lengths = a.min_len..=a.max_len;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let task = match a.task {
        TaskKind::Mapping => gen_mapping_task(total, a.vocab_size, lengths, a.expand_prob, &mut rng)?,
        TaskKind::Multimodal => gen_multimodal_task(total, a.vocab_size, lengths, &mut rng)?,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let vocab = Vocab::synthetic(a.vocab_size);
    vocab.save(&a.out.join("vocab.txt"))?;
    for (name, part) in ["train", "valid", "test"].iter().zip(task.corpus.split(&a.sizes)) {
        save_tsv(&part, &vocab, &a.out.join(format!("{name}.tsv")))?;
        info!("{name}: {} pairs", part.len());
    }
    Ok(())
}

fn load_corpus(path: &Path, vocab: &Vocab) -> Result<ParallelCorpus> {
    let (corpus, unknown) = load_tsv(path, vocab)?;
    if unknown > 0 {
        log::warn!("{}: {unknown} tokens not in the vocabulary became <unk>", path.display());
    }
    Ok(corpus)
}

fn load_config(c: &Corpora, stage: Stage) -> Result<TrainConfig> {
    let mut cfg = match &c.config {
        Some(p) => TrainConfig::load(p, stage).with_context(|| format!("loading {}", p.display()))?,
        None => TrainConfig::desk(stage),
    };
    for kv in &c.overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim()).map_err(anyhow::Error::msg)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_stage(c: &Corpora, stage: Stage, init: Option<NatModel>) -> Result<TrainOutcome> {
    let cfg = load_config(c, stage)?;
    let vocab = Vocab::load(&c.vocab)?;
    let (train, valid) = (load_corpus(&c.train, &vocab)?, load_corpus(&c.valid, &vocab)?);
    let data = TrainData {
        train: &train,
        valid: &valid,
        vocab: &vocab,
    };
    let out = match init {
        None => {
            let model = NatModel::new(model_config(&cfg, &vocab), cfg.seed)?;
            info!("training {} parameters for {} steps", model.param_count(), cfg.steps);
            train_cmlm(model, data, &cfg, Some(&c.out))?
        }
        Some(model) => {
            ensure!(
                model.config().vocab_size == vocab.len(),
                "checkpoint vocabulary has {} entries, {} has {}",
                model.config().vocab_size,
                c.vocab.display(),
                vocab.len()
            );
            finetune_mgmo(model, data, &cfg, Some(&c.out))?
        }
    };
    info!("best validation BLEU {:.2} at step {}", out.best_bleu, out.best_step);
    Ok(out)
}

fn train(a: Train) -> Result<()> {
    run_stage(&a.corpora, Stage::Cmlm, None).map(drop)
}

fn finetune(a: Finetune) -> Result<()> {
    let init = checkpoint::load(&a.init)?;
    run_stage(&a.corpora, Stage::Mgmo, Some(init)).map(drop)
}

/// Nonempty lines of a whitespace-tokenized text file, encoded.
fn read_sentences(path: &Path, vocab: &Vocab) -> Result<Vec<Vec<TokenId>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let (ids, _) = vocab.encode(line);
        if ids.is_empty() {
            bail!("{}:{}: empty sentence", path.display(), i + 1);
        }
        out.push(ids);
    }
    Ok(out)
}

fn decode(a: Decode) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    let vocab = Vocab::load(&a.vocab)?;
    let sources = read_sentences(&a.input, &vocab)?;
    let hyps = decode_corpus(&model, &sources, a.candidates)?;
    let mut text = String::new();
    for h in &hyps {
        let _ = writeln!(text, "{}", vocab.decode(h));
    }
    fs::write(&a.output, text).with_context(|| format!("writing {}", a.output.display()))?;
    info!("decoded {} sentences", hyps.len());
    Ok(())
}

fn score(a: Score) -> Result<()> {
    let read = |p: &Path| -> Result<Vec<String>> {
        Ok(fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))?
            .lines()
            .map(str::to_string)
            .collect())
    };
    let (hyp_lines, ref_lines) = (read(&a.hyp)?, read(&a.reference)?);
    ensure!(
        hyp_lines.len() == ref_lines.len(),
        "{} has {} lines but {} has {}",
        a.hyp.display(),
        hyp_lines.len(),
        a.reference.display(),
        ref_lines.len()
    );
    // A vocabulary over both files turns every word into a content token.
    let mut vocab = Vocab::new();
    for w in hyp_lines.iter().chain(&ref_lines).flat_map(|l| l.split_whitespace()) {
        if vocab.id(w).is_none() {
            vocab.add(w);
        }
    }
    let encode = |lines: &[String]| -> Vec<Vec<TokenId>> { lines.iter().map(|l| vocab.encode(l).0).collect() };
    let (hyps, refs) = (encode(&hyp_lines), encode(&ref_lines));
    let mut out = String::from("line\tscore\n");
    let mut sum = 0.0;
    for (i, (h, r)) in hyps.iter().zip(&refs).enumerate() {
        let s = a
            .metric
            .score(h, r, a.max_ngram, &vocab)
            .with_context(|| format!("line {}", i + 1))?
            .value();
        sum += s;
        let _ = writeln!(out, "{}\t{s:.6}", i + 1);
    }
    let (label, corpus) = match a.metric {
        Metric::Bleu => ("corpus_bleu", corpus_bleu(&hyps, &refs, a.max_ngram)?),
        Metric::Gleu => ("corpus_gleu", corpus_gleu(&hyps, &refs, a.max_ngram)?),
        _ => ("mean", if hyps.is_empty() { 0.0 } else { sum / hyps.len() as f64 }),
    };
    let _ = writeln!(out, "{label}\t{corpus:.6}");
    print!("{out}");
    Ok(())
}

fn analyze(a: Analyze) -> Result<()> {
    match a {
        Analyze::Lengths {
            model,
            edges,
            candidates,
        } => {
            let (m, corpus) = model.load()?;
            println!("min_len\tmax_len\tcount\tbleu");
            for b in analyze_lengths(&m, &corpus, &edges, candidates)? {
                let hi = b.hi.map_or_else(|| "inf".to_string(), |h| (h - 1).to_string());
                let bleu = b.bleu.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"));
                println!("{}\t{hi}\t{}\t{bleu}", b.lo, b.count);
            }
        }
        Analyze::Granularity {
            data,
            vocab,
            length,
            gamma,
            draws,
            seed,
        } => {
            ensure!(gamma > 0.0, "gamma must be positive");
            let lengths = match (data, vocab, length) {
                (Some(d), Some(v), None) => {
                    let corpus = load_corpus(&d, &Vocab::load(&v)?)?;
                    corpus.pairs.iter().map(|p| p.target.len()).collect()
                }
                (None, None, Some(l)) if l >= 1 => vec![l],
                _ => bail!("pass --data with --vocab, or a positive --length"),
            };
            let hist = granularity_histogram(&lengths, gamma, draws, &mut ChaCha8Rng::seed_from_u64(seed));
            println!("run_length\tproportion");
            for (i, p) in hist.proportions().iter().enumerate() {
                let label = if i + 1 == GranularityHistogram::BUCKETS {
                    format!("{}+", i + 1)
                } else {
                    (i + 1).to_string()
                };
                println!("{label}\t{p:.6}");
            }
        }
        Analyze::Confidence { model } => {
            let (m, corpus) = model.load()?;
            let c = confidence_stats(&m, &corpus)?;
            println!("positions\tmean_argmax_prob\tncm_proxy");
            println!("{}\t{:.6}\t{:.6}", c.positions, c.mean_argmax_prob, c.ncm_proxy);
        }
        Analyze::Repetition { input } => {
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let hyps: Vec<Vec<&str>> = text.lines().map(|l| l.split_whitespace().collect()).collect();
            println!("sentences\trepetition_rate");
            println!("{}\t{:.6}", hyps.len(), repetition_rate(&hyps)?);
        }
    }
    Ok(())
}

impl ModelOnData {
    fn load(&self) -> Result<(NatModel, ParallelCorpus)> {
        let model = checkpoint::load(&self.checkpoint)?;
        let vocab = Vocab::load(&self.vocab)?;
        Ok((model, load_corpus(&self.data, &vocab)?))
    }
}
