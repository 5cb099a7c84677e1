//! Training configuration and its `key=value` file format.
//!
//! Blank lines and lines starting with `#` are ignored. `preset=desk` or
//! `preset=paper` selects the starting values; every other key overrides
//! one field. Unknown keys are errors.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::objectives::MgmoConfig;
use crate::optim::LrSchedule;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Cmlm,
    Mgmo,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Cmlm => "cmlm",
            Stage::Mgmo => "mgmo",
        })
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cmlm" => Ok(Stage::Cmlm),
            "mgmo" => Ok(Stage::Mgmo),
            _ => Err(format!("unknown stage {s:?}")),
        }
    }
}

/// Finetuning loss: the masked multi-granularity objective or the unmasked
/// metric-based baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Mgmo,
    Mo,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Mgmo => "mgmo",
            Objective::Mo => "mo",
        })
    }
}

impl FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mgmo" => Ok(Objective::Mgmo),
            "mo" => Ok(Objective::Mo),
            _ => Err(format!("unknown objective {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: u64,
    pub warmup: u64,
    pub peak_lr: f64,
    /// Annealed rate at the last step as a fraction of `peak_lr`.
    pub final_lr_ratio: f64,
    /// Fixed finetuning rate.
    pub lr: f64,
    /// CMLM batch budget in tokens, padding included.
    pub batch_tokens: usize,
    /// Finetuning batch size in sentences.
    pub batch_sentences: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub weight_decay: f64,
    pub valid_interval: u64,
    /// Length candidates for validation decoding.
    pub candidates: usize,
    pub seed: u64,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_len: usize,
    pub objective: Objective,
    pub mgmo: MgmoConfig,
}

impl TrainConfig {
    pub fn desk(stage: Stage) -> Self {
        TrainConfig {
            stage,
            steps: match stage {
                Stage::Cmlm => 2000,
                Stage::Mgmo => 1000,
            },
            warmup: 200,
            peak_lr: 3e-3,
            final_lr_ratio: 0.05,
            lr: 1e-4,
            batch_tokens: 1024,
            batch_sentences: 32,
            dropout: match stage {
                Stage::Cmlm => 0.1,
                Stage::Mgmo => 0.0,
            },
            label_smoothing: 0.1,
            weight_decay: 0.0,
            valid_interval: 100,
            candidates: 5,
            seed: 1,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            max_len: 32,
            objective: Objective::Mgmo,
            mgmo: MgmoConfig {
                seed: 1,
                ..MgmoConfig::default()
            },
        }
    }

    /// Published Transformer-Base scale values.
    pub fn paper(stage: Stage) -> Self {
        TrainConfig {
            steps: match stage {
                Stage::Cmlm => 300_000,
                Stage::Mgmo => 100_000,
            },
            warmup: 10_000,
            peak_lr: 5e-4,
            lr: 2e-6,
            batch_tokens: 32_768,
            batch_sentences: 256,
            dropout: match stage {
                Stage::Cmlm => 0.3,
                Stage::Mgmo => 0.1,
            },
            weight_decay: 0.01,
            d_model: 512,
            n_heads: 8,
            n_layers: 6,
            max_len: 256,
            mgmo: MgmoConfig {
                k: 40,
                ..Self::desk(stage).mgmo
            },
            ..Self::desk(stage)
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        match self.stage {
            Stage::Cmlm => LrSchedule::WarmupExp {
                warmup: self.warmup,
                peak: self.peak_lr,
                total: self.steps,
                final_ratio: self.final_lr_ratio,
            },
            Stage::Mgmo => LrSchedule::Fixed(self.lr),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.batch_tokens < self.max_len {
            return bad(format!(
                "batch_tokens {} smaller than max_len {}",
                self.batch_tokens, self.max_len
            ));
        }
        if self.batch_sentences == 0 {
            return bad("batch_sentences must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.candidates == 0 || self.candidates > self.max_len {
            return bad(format!("candidates {} outside 1..={}", self.candidates, self.max_len));
        }
        if self.valid_interval == 0 {
            return bad("valid_interval must be >= 1".into());
        }
        if self.stage == Stage::Mgmo {
            self.mgmo
                .validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    pub fn parse(text: &str, stage: Stage) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: i + 1,
                msg: format!("expected key=value, found {line:?}"),
            })?;
            entries.push((i + 1, k.trim(), v.trim()));
        }
        let mut cfg = Self::desk(stage);
        if let Some(&(line, _, v)) = entries.iter().find(|e| e.1 == "preset") {
            cfg = match v {
                "desk" => Self::desk(stage),
                "paper" => Self::paper(stage),
                _ => {
                    return Err(ConfigError::Parse {
                        line,
                        msg: format!("unknown preset {v:?}"),
                    })
                }
            };
        }
        for (line, k, v) in entries {
            cfg.set(k, v).map_err(|msg| ConfigError::Parse { line, msg })?;
        }
        if cfg.stage != stage {
            return Err(ConfigError::Invalid(format!(
                "file declares stage {} but {} was requested",
                cfg.stage, stage
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, stage: Stage) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, stage)
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn p<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String>
        where
            T::Err: fmt::Display,
        {
            v.parse().map_err(|e| format!("{key}: cannot parse {v:?}: {e}"))
        }
        match key {
            "preset" => {}
            "stage" => self.stage = p(key, value)?,
            "steps" => self.steps = p(key, value)?,
            "warmup" => self.warmup = p(key, value)?,
            "peak_lr" => self.peak_lr = p(key, value)?,
            "final_lr_ratio" => self.final_lr_ratio = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "batch_tokens" => self.batch_tokens = p(key, value)?,
            "batch_sentences" => self.batch_sentences = p(key, value)?,
            "dropout" => self.dropout = p(key, value)?,
            "label_smoothing" => self.label_smoothing = p(key, value)?,
            "weight_decay" => self.weight_decay = p(key, value)?,
            "valid_interval" => self.valid_interval = p(key, value)?,
            "candidates" => self.candidates = p(key, value)?,
            "seed" => {
                self.seed = p(key, value)?;
                self.mgmo.seed = self.seed;
            }
            "d_model" => self.d_model = p(key, value)?,
            "n_heads" => self.n_heads = p(key, value)?,
            "n_layers" => self.n_layers = p(key, value)?,
            "max_len" => self.max_len = p(key, value)?,
            "objective" => self.objective = p(key, value)?,
            "gamma" => self.mgmo.gamma = p(key, value)?,
            "k" => self.mgmo.k = p(key, value)?,
            "alpha" => self.mgmo.alpha = p(key, value)?,
            "metric" => self.mgmo.metric = p(key, value)?,
            "max_ngram" => self.mgmo.max_ngram = p(key, value)?,
            "strategy" => self.mgmo.strategy = p(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.mgmo;
        let lines: [(&str, String); 25] = [
            ("stage", self.stage.to_string()),
            ("steps", self.steps.to_string()),
            ("warmup", self.warmup.to_string()),
            ("peak_lr", self.peak_lr.to_string()),
            ("final_lr_ratio", self.final_lr_ratio.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_tokens", self.batch_tokens.to_string()),
            ("batch_sentences", self.batch_sentences.to_string()),
            ("dropout", self.dropout.to_string()),
            ("label_smoothing", self.label_smoothing.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("valid_interval", self.valid_interval.to_string()),
            ("candidates", self.candidates.to_string()),
            ("seed", self.seed.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("max_len", self.max_len.to_string()),
            ("objective", self.objective.to_string()),
            ("gamma", m.gamma.to_string()),
            ("k", m.k.to_string()),
            ("alpha", m.alpha.to_string()),
            ("metric", m.metric.to_string()),
            ("max_ngram", m.max_ngram.to_string()),
            ("strategy", m.strategy.to_string()),
        ];
        for (k, v) in &lines {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}
