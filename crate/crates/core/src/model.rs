//! Micro transformer encoder-decoder for fully non-autoregressive decoding.
//!
//! Every target position is predicted independently given the source and
//! the decoder input (no causal mask). The length head mean-pools the final
//! encoder states and maps them through one linear layer to a distribution
//! over lengths `1..=max_len`.
//!
//! Batches are processed without padding: sequences are concatenated along
//! the row dimension and attention is restricted to per-sequence blocks.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::data::{TokenId, NUM_RESERVED, UNK};
use crate::rng;
use crate::tape::{AttentionBlock, AttentionLayout, Gradients, Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty {0} sequence")]
    EmptySequence(&'static str),
    #[error("{what} length {len} exceeds max_len {max}")]
    TooLong {
        what: &'static str,
        len: usize,
        max: usize,
    },
    #[error("token id {id} outside vocabulary of {vocab}")]
    BadToken { id: TokenId, vocab: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing parameter {0}")]
    MissingParam(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Full vocabulary size, reserved symbols included.
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Layers in each of the encoder and the decoder.
    pub n_layers: usize,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            max_len: 32,
        }
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }

    /// Output classes: content tokens only.
    pub fn n_classes(&self) -> usize {
        self.vocab_size - NUM_RESERVED
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= NUM_RESERVED {
            return Err(ModelError::Config("vocabulary has no content tokens".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len == 0 {
            return Err(ModelError::Config("max_len must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    ///
    /// With `d = d_model`, `V` the vocabulary, `C = V - 3` output classes,
    /// `L = max_len` and `n` layers per stack:
    /// `V d + n (12 d^2 + 13 d) + n (16 d^2 + 19 d) + 4 d + (d + 1) C + (d + 1) L`.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let n = self.n_layers;
        let (v, c, l) = (self.vocab_size, self.n_classes(), self.max_len);
        v * d + n * (12 * d * d + 13 * d) + n * (16 * d * d + 19 * d) + 4 * d + (d + 1) * c
            + (d + 1) * l
    }
}

#[derive(Clone, Debug)]
struct AttnIdx {
    ln_g: usize,
    ln_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Debug)]
struct FfnIdx {
    ln_g: usize,
    ln_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct EncLayer {
    attn: AttnIdx,
    ffn: FfnIdx,
}

#[derive(Clone, Debug)]
struct DecLayer {
    self_attn: AttnIdx,
    cross: AttnIdx,
    ffn: FfnIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: usize,
    enc: Vec<EncLayer>,
    enc_ln: (usize, usize),
    dec: Vec<DecLayer>,
    dec_ln: (usize, usize),
    out_w: usize,
    out_b: usize,
    len_w: usize,
    len_b: usize,
}

enum Init {
    Zeros,
    Ones,
    Glorot,
    Normal(f64),
}

struct Spec {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Spec {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        let mut p = |s: &str, shape: Vec<usize>, init| self.push(format!("{prefix}.{s}"), shape, init);
        AttnIdx {
            ln_g: p("ln.g", vec![d], Init::Ones),
            ln_b: p("ln.b", vec![d], Init::Zeros),
            wq: p("wq", vec![d, d], Init::Glorot),
            bq: p("bq", vec![d], Init::Zeros),
            wk: p("wk", vec![d, d], Init::Glorot),
            bk: p("bk", vec![d], Init::Zeros),
            wv: p("wv", vec![d, d], Init::Glorot),
            bv: p("bv", vec![d], Init::Zeros),
            wo: p("wo", vec![d, d], Init::Glorot),
            bo: p("bo", vec![d], Init::Zeros),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> FfnIdx {
        let mut p = |s: &str, shape: Vec<usize>, init| self.push(format!("{prefix}.{s}"), shape, init);
        FfnIdx {
            ln_g: p("ln.g", vec![d], Init::Ones),
            ln_b: p("ln.b", vec![d], Init::Zeros),
            w1: p("w1", vec![d, f], Init::Glorot),
            b1: p("b1", vec![f], Init::Zeros),
            w2: p("w2", vec![f, d], Init::Glorot),
            b2: p("b2", vec![d], Init::Zeros),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Spec) {
    let d = cfg.d_model;
    let mut s = Spec {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let embed = s.push(
        "embed".into(),
        vec![cfg.vocab_size, d],
        Init::Normal(1.0 / (d as f64).sqrt()),
    );
    let enc = (0..cfg.n_layers)
        .map(|l| EncLayer {
            attn: s.attn(&format!("enc.{l}.attn"), d),
            ffn: s.ffn(&format!("enc.{l}.ffn"), d, cfg.ffn_dim()),
        })
        .collect();
    let enc_ln = (
        s.push("enc.ln.g".into(), vec![d], Init::Ones),
        s.push("enc.ln.b".into(), vec![d], Init::Zeros),
    );
    let dec = (0..cfg.n_layers)
        .map(|l| DecLayer {
            self_attn: s.attn(&format!("dec.{l}.self"), d),
            cross: s.attn(&format!("dec.{l}.cross"), d),
            ffn: s.ffn(&format!("dec.{l}.ffn"), d, cfg.ffn_dim()),
        })
        .collect();
    let dec_ln = (
        s.push("dec.ln.g".into(), vec![d], Init::Ones),
        s.push("dec.ln.b".into(), vec![d], Init::Zeros),
    );
    let out_w = s.push("out.w".into(), vec![d, cfg.n_classes()], Init::Glorot);
    let out_b = s.push("out.b".into(), vec![cfg.n_classes()], Init::Zeros);
    // Zero length head: the untrained length distribution is uniform.
    let len_w = s.push("len.w".into(), vec![d, cfg.max_len], Init::Zeros);
    let len_b = s.push("len.b".into(), vec![cfg.max_len], Init::Zeros);
    (
        Layout {
            embed,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out_w,
            out_b,
            len_w,
            len_b,
        },
        s,
    )
}

fn sinusoidal(max_len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let freq = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[pos * d + 2 * i] = freq.sin();
            pe[pos * d + 2 * i + 1] = freq.cos();
        }
    }
    pe
}

#[derive(Clone, Debug)]
pub struct NatModel {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Tensor>,
    positions: Vec<f64>,
}

impl NatModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, spec) = build_layout(&config);
        let mut rng = rng::stream(seed, &[rng::tag::INIT]);
        let params = spec
            .shapes
            .iter()
            .zip(&spec.inits)
            .map(|(shape, init)| init_tensor(shape, init, &mut rng))
            .collect();
        Ok(NatModel {
            positions: sinusoidal(config.max_len, config.d_model),
            config,
            layout,
            names: spec.names,
            params,
        })
    }

    /// Builds a model from named tensors; every parameter must be present
    /// with its expected shape.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let mut lookup: std::collections::HashMap<String, Tensor> = named.into_iter().collect();
        for (i, name) in model.names.iter().enumerate() {
            let t = lookup
                .remove(name)
                .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if t.shape() != model.params[i].shape() {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    expected: model.params[i].shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            model.params[i] = t;
        }
        if let Some(extra) = lookup.keys().next() {
            return Err(ModelError::Config(format!("unexpected parameter {extra}")));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Single-source encoder states, `[len, d_model]`.
    pub fn encode(&self, source: &[TokenId]) -> Result<Tensor> {
        let mut s = Session::new(self, false);
        let enc = s.encode(&[source])?;
        Ok(s.tape.value(enc.states).clone())
    }

    /// Length distribution `p(T = 1..=max_len | x)`.
    pub fn predict_length(&self, source: &[TokenId]) -> Result<Vec<f64>> {
        let mut s = Session::new(self, false);
        let enc = s.encode(&[source])?;
        let lp = s.length_log_probs(&enc)?;
        Ok(s.tape.value(lp).data().iter().map(|v| v.exp()).collect())
    }

    /// Per-position log-distributions over content tokens for one decoder
    /// input, `[len, n_classes]`.
    pub fn decode_parallel(&self, source: &[TokenId], decoder_input: &[TokenId]) -> Result<Tensor> {
        let mut s = Session::new(self, false);
        let enc = s.encode(&[source])?;
        let dec = s.decode(
            &enc,
            &[DecoderRequest {
                sentence: 0,
                input: decoder_input.to_vec(),
            }],
        )?;
        Ok(s.tape.value(dec.log_probs).clone())
    }

    pub fn greedy_decode(&self, source: &[TokenId], candidates: usize) -> Result<Vec<TokenId>> {
        Ok(self
            .greedy_decode_batch(&[source], candidates)?
            .pop()
            .expect("one output per source"))
    }

    /// One parallel pass per candidate length. The `candidates` most likely
    /// lengths are decoded from all-`UNK` inputs; each is scored by its mean
    /// argmax log-probability and the best wins (ties: shorter length).
    pub fn greedy_decode_batch(
        &self,
        sources: &[&[TokenId]],
        candidates: usize,
    ) -> Result<Vec<Vec<TokenId>>> {
        Ok(self
            .decode_candidates(sources, candidates)?
            .into_iter()
            .map(|c| c.best().tokens.clone())
            .collect())
    }

    /// All scored candidates per source, for inspection and reranking tests.
    pub fn decode_candidates(
        &self,
        sources: &[&[TokenId]],
        candidates: usize,
    ) -> Result<Vec<CandidateSet>> {
        if candidates == 0 || candidates > self.config.max_len {
            return Err(ModelError::Config(format!(
                "candidate count {candidates} outside 1..={}",
                self.config.max_len
            )));
        }
        let mut out = Vec::with_capacity(sources.len());
        for chunk in sources.chunks(64) {
            let mut s = Session::new(self, false);
            let enc = s.encode(chunk)?;
            let len_lp = s.length_log_probs(&enc)?;
            let lp = s.tape.value(len_lp).clone();
            let mut requests = Vec::new();
            for i in 0..chunk.len() {
                for len in top_lengths(lp.row(i), candidates) {
                    requests.push(DecoderRequest {
                        sentence: i,
                        input: vec![UNK; len],
                    });
                }
            }
            let dec = s.decode(&enc, &requests)?;
            let rows = s.tape.value(dec.log_probs);
            let mut sets: Vec<CandidateSet> = (0..chunk.len())
                .map(|_| CandidateSet {
                    candidates: Vec::new(),
                })
                .collect();
            for (r, &(start, len)) in requests.iter().zip(&dec.spans) {
                let mut tokens = Vec::with_capacity(len);
                let mut total = 0.0;
                for t in 0..len {
                    let (c, v) = argmax(rows.row(start + t));
                    tokens.push(class_to_token(c));
                    total += v;
                }
                sets[r.sentence].candidates.push(Candidate {
                    tokens,
                    score: total / len as f64,
                    length_log_prob: lp.row(r.sentence)[len - 1],
                });
            }
            out.extend(sets);
        }
        Ok(out)
    }
}

fn init_tensor(shape: &[usize], init: &Init, rng: &mut ChaCha8Rng) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, 1.0),
        Init::Glorot => {
            let (fan_in, fan_out) = (shape[0], shape[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n = fan_in * fan_out;
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-a..a)).collect())
                .expect("shape")
        }
        Init::Normal(std) => {
            let dist = Normal::new(0.0, *std).expect("positive std");
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
                .expect("shape")
        }
    }
}

pub fn class_to_token(c: usize) -> TokenId {
    (c + NUM_RESERVED) as TokenId
}

/// Output class of a content token; `None` for reserved symbols.
pub fn token_to_class(t: TokenId) -> Option<usize> {
    (t as usize).checked_sub(NUM_RESERVED)
}

fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in row.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// The `l` most probable lengths (1-based), most probable first; ties go to
/// the shorter length.
pub fn top_lengths(length_log_probs: &[f64], l: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..length_log_probs.len()).collect();
    idx.sort_by(|&a, &b| {
        length_log_probs[b]
            .partial_cmp(&length_log_probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.into_iter().take(l).map(|i| i + 1).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub tokens: Vec<TokenId>,
    /// Mean per-token log-probability of the argmax tokens.
    pub score: f64,
    pub length_log_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    /// In decreasing order of length probability.
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    /// Highest score; ties broken by shorter length, then by length rank.
    pub fn best(&self) -> &Candidate {
        let mut best = &self.candidates[0];
        for c in &self.candidates[1..] {
            if c.score > best.score || (c.score == best.score && c.tokens.len() < best.tokens.len()) {
                best = c;
            }
        }
        best
    }
}

/// One decoder pass request: the input sequence and the batch sentence whose
/// encoder states it attends to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderRequest {
    pub sentence: usize,
    pub input: Vec<TokenId>,
}

/// Encoder output for a batch: `states` is `[total source tokens, d]` and
/// `spans[i] = (start row, length)` of sentence `i`.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub states: Var,
    pub spans: Vec<(usize, usize)>,
}

/// Decoder output: `log_probs` is `[total decoder tokens, n_classes]`, with
/// request `i` at rows `spans[i]`.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub log_probs: Var,
    pub spans: Vec<(usize, usize)>,
}

/// A forward pass of one model recorded on its own tape.
pub struct Session<'m> {
    model: &'m NatModel,
    pub tape: Tape,
    params: Vec<Var>,
    dropout: Option<(f64, ChaCha8Rng)>,
    length_head_detached: bool,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m NatModel, requires_grad: bool) -> Self {
        let mut tape = Tape::new();
        let params = model
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), requires_grad))
            .collect();
        Session {
            model,
            tape,
            params,
            dropout: None,
            length_head_detached: false,
        }
    }

    /// Training-mode session with inverted dropout at rate `p`.
    pub fn with_dropout(model: &'m NatModel, p: f64, rng: ChaCha8Rng) -> Self {
        let mut s = Self::new(model, true);
        if p > 0.0 {
            s.dropout = Some((p, rng));
        }
        s
    }

    /// Stops gradients of the length head at the pooled encoder states, so
    /// length terms train the head alone and leave the encoder untouched.
    pub fn detach_length_head(mut self) -> Self {
        self.length_head_detached = true;
        self
    }

    pub fn model(&self) -> &NatModel {
        self.model
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.params.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }

    fn p(&self, idx: usize) -> Var {
        self.params[idx]
    }

    fn drop(&mut self, x: Var) -> Result<Var> {
        let Some((p, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let p = *p;
        let shape = self.tape.value(x).shape().to_vec();
        let n = self.tape.value(x).len();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = self.tape.constant(Tensor::new(shape, mask)?);
        Ok(self.tape.mul(x, m)?)
    }

    fn linear(&mut self, x: Var, w: usize, b: usize) -> Result<Var> {
        let h = self.tape.matmul(x, self.p(w))?;
        Ok(self.tape.add(h, self.p(b))?)
    }

    fn embed(&mut self, seqs: &[&[TokenId]], what: &'static str) -> Result<(Var, Vec<(usize, usize)>)> {
        let cfg = self.model.config;
        let d = cfg.d_model;
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut spans = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.is_empty() {
                return Err(ModelError::EmptySequence(what));
            }
            if s.len() > cfg.max_len {
                return Err(ModelError::TooLong {
                    what,
                    len: s.len(),
                    max: cfg.max_len,
                });
            }
            spans.push((ids.len(), s.len()));
            for (t, &id) in s.iter().enumerate() {
                if id as usize >= cfg.vocab_size {
                    return Err(ModelError::BadToken {
                        id,
                        vocab: cfg.vocab_size,
                    });
                }
                ids.push(id as usize);
                pos.extend_from_slice(&self.model.positions[t * d..(t + 1) * d]);
            }
        }
        let n = ids.len();
        let e = self.tape.embedding(self.p(self.model.layout.embed), &ids)?;
        let e = self.tape.scale(e, (d as f64).sqrt());
        let pe = self.tape.constant(Tensor::new(vec![n, d], pos)?);
        let x = self.tape.add(e, pe)?;
        Ok((self.drop(x)?, spans))
    }

    fn attention_sublayer(
        &mut self,
        x: Var,
        memory: Option<Var>,
        idx: &AttnIdx,
        layout: Rc<AttentionLayout>,
    ) -> Result<Var> {
        let h = self
            .tape
            .layer_norm(x, self.p(idx.ln_g), self.p(idx.ln_b))?;
        let kv_src = memory.unwrap_or(h);
        let q = self.linear(h, idx.wq, idx.bq)?;
        let k = self.linear(kv_src, idx.wk, idx.bk)?;
        let v = self.linear(kv_src, idx.wv, idx.bv)?;
        let a = self.tape.attention(q, k, v, layout)?;
        let o = self.linear(a, idx.wo, idx.bo)?;
        let o = self.drop(o)?;
        Ok(self.tape.add(x, o)?)
    }

    fn ffn_sublayer(&mut self, x: Var, idx: &FfnIdx) -> Result<Var> {
        let h = self
            .tape
            .layer_norm(x, self.p(idx.ln_g), self.p(idx.ln_b))?;
        let h = self.linear(h, idx.w1, idx.b1)?;
        let h = self.tape.gelu(h);
        let h = self.linear(h, idx.w2, idx.b2)?;
        let h = self.drop(h)?;
        Ok(self.tape.add(x, h)?)
    }

    fn self_layout(&self, spans: &[(usize, usize)]) -> Rc<AttentionLayout> {
        Rc::new(AttentionLayout {
            heads: self.model.config.n_heads,
            blocks: spans
                .iter()
                .map(|&(s, l)| AttentionBlock {
                    q_start: s,
                    q_len: l,
                    k_start: s,
                    k_len: l,
                })
                .collect(),
        })
    }

    pub fn encode(&mut self, sources: &[&[TokenId]]) -> Result<Encoded> {
        let (mut x, spans) = self.embed(sources, "source")?;
        let layout = self.self_layout(&spans);
        let model = self.model;
        for layer in &model.layout.enc {
            x = self.attention_sublayer(x, None, &layer.attn, layout.clone())?;
            x = self.ffn_sublayer(x, &layer.ffn)?;
        }
        let (g, b) = model.layout.enc_ln;
        let states = self.tape.layer_norm(x, self.p(g), self.p(b))?;
        Ok(Encoded { states, spans })
    }

    /// Log-probabilities of lengths `1..=max_len`, `[sentences, max_len]`.
    pub fn length_log_probs(&mut self, enc: &Encoded) -> Result<Var> {
        let n = self.tape.value(enc.states).shape()[0];
        let s = enc.spans.len();
        let mut pool = vec![0.0; s * n];
        for (i, &(start, len)) in enc.spans.iter().enumerate() {
            for r in start..start + len {
                pool[i * n + r] = 1.0 / len as f64;
            }
        }
        let pool = self.tape.constant(Tensor::new(vec![s, n], pool)?);
        let mut pooled = self.tape.matmul(pool, enc.states)?;
        if self.length_head_detached {
            pooled = self.tape.detach(pooled);
        }
        let lay = &self.model.layout;
        let logits = self.linear(pooled, lay.len_w, lay.len_b)?;
        Ok(self.tape.log_softmax(logits))
    }

    /// One parallel decoder pass per request.
    pub fn decode(&mut self, enc: &Encoded, requests: &[DecoderRequest]) -> Result<Decoded> {
        let inputs: Vec<&[TokenId]> = requests.iter().map(|r| r.input.as_slice()).collect();
        let (mut x, spans) = self.embed(&inputs, "decoder input")?;
        let self_layout = self.self_layout(&spans);
        let cross_layout = Rc::new(AttentionLayout {
            heads: self.model.config.n_heads,
            blocks: requests
                .iter()
                .zip(&spans)
                .map(|(r, &(s, l))| {
                    let (ks, kl) = enc.spans[r.sentence];
                    AttentionBlock {
                        q_start: s,
                        q_len: l,
                        k_start: ks,
                        k_len: kl,
                    }
                })
                .collect(),
        });
        let model = self.model;
        for layer in &model.layout.dec {
            x = self.attention_sublayer(x, None, &layer.self_attn, self_layout.clone())?;
            x = self.attention_sublayer(x, Some(enc.states), &layer.cross, cross_layout.clone())?;
            x = self.ffn_sublayer(x, &layer.ffn)?;
        }
        let (g, b) = model.layout.dec_ln;
        let h = self.tape.layer_norm(x, self.p(g), self.p(b))?;
        let logits = self.linear(h, model.layout.out_w, model.layout.out_b)?;
        Ok(Decoded {
            log_probs: self.tape.log_softmax(logits),
            spans,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NatModel {
        NatModel::new(
            ModelConfig {
                vocab_size: 11,
                d_model: 8,
                n_heads: 2,
                n_layers: 1,
                max_len: 6,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for cfg in [
            ModelConfig::desk(67),
            ModelConfig {
                vocab_size: 11,
                d_model: 8,
                n_heads: 2,
                n_layers: 3,
                max_len: 6,
            },
        ] {
            let m = NatModel::new(cfg, 0).unwrap();
            assert_eq!(m.param_count(), cfg.param_count());
        }
    }

    #[test]
    fn encoder_shape_and_determinism() {
        let m = tiny();
        let a = m.encode(&[3, 4, 5, 6, 7]).unwrap();
        assert_eq!(a.shape(), &[5, 8]);
        assert_eq!(a, m.encode(&[3, 4, 5, 6, 7]).unwrap());
        assert!(matches!(m.encode(&[]), Err(ModelError::EmptySequence(_))));
    }

    #[test]
    fn batch_order_does_not_change_states() {
        let m = tiny();
        let (a, b): (&[TokenId], &[TokenId]) = (&[3, 4, 5], &[6, 7]);
        let mut s1 = Session::new(&m, false);
        let e1 = s1.encode(&[a, b]).unwrap();
        let mut s2 = Session::new(&m, false);
        let e2 = s2.encode(&[b, a]).unwrap();
        let (v1, v2) = (s1.tape.value(e1.states), s2.tape.value(e2.states));
        assert_eq!(&v1.data()[..3 * 8], &v2.data()[2 * 8..]);
        assert_eq!(&v1.data()[3 * 8..], &v2.data()[..2 * 8]);
    }

    #[test]
    fn decoder_rows_are_distributions() {
        let m = tiny();
        let rows = m.decode_parallel(&[3, 4, 5], &[UNK; 4]).unwrap();
        assert_eq!(rows.shape(), &[4, 8]);
        for r in 0..4 {
            let s: f64 = rows.row(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert!(matches!(
            m.decode_parallel(&[3], &[UNK; 7]),
            Err(ModelError::TooLong { .. })
        ));
    }

    #[test]
    fn untrained_length_head_is_uniform() {
        let m = tiny();
        let p = m.predict_length(&[3, 4]).unwrap();
        assert_eq!(p.len(), 6);
        for v in p {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn top_lengths_orders_by_probability_then_length() {
        let lp = [-2.0, -1.0, -1.0, -3.0];
        assert_eq!(top_lengths(&lp, 3), vec![2, 3, 1]);
        assert_eq!(top_lengths(&lp, 4).len(), 4);
    }
}
