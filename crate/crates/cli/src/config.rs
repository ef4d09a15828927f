//! Run configuration: defaults, JSON file, then command-line overrides.

use std::path::{Path, PathBuf};

use deltafix_core::change_builder::{Variant, DEFAULT_CONTEXT_LINES};
use deltafix_core::delta_model::ModelConfig;
use deltafix_core::encoder::EncoderConfig;
use deltafix_core::evaluation::DEFAULT_L_VALUES;
use deltafix_core::repo_miner::{TimeRange, DEFAULT_NVF_RATIO};
use deltafix_core::trainer::{SplitSpec, TrainConfig, DEFAULT_TRAIN_FRACTION};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepoEntry {
    pub id: String,
    pub path: PathBuf,
}

/// Encoder shape; vocabulary size and sequence length come from the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Head hidden width; the encoder width when absent.
    pub head_hidden: Option<usize>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            head_hidden: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_steps: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            max_steps: t.max_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub repos: Vec<RepoEntry>,
    /// CSV `repo_id,commit_hash,vuln_id`.
    pub labels: Option<PathBuf>,
    pub workdir: PathBuf,
    /// Inclusive commit-time window for mining, UTC seconds.
    pub since: Option<i64>,
    pub until: Option<i64>,
    pub k: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub encoder: EncoderSection,
    pub variant: Variant,
    pub train: TrainSection,
    pub split: SplitSpec,
    /// NVF per VF kept in train and validation; `null` keeps everything.
    pub nvf_ratio: Option<f64>,
    pub l_values: Vec<f64>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            repos: Vec::new(),
            labels: None,
            workdir: PathBuf::from("work"),
            since: None,
            until: None,
            k: DEFAULT_CONTEXT_LINES,
            max_len: 256,
            vocab_size: 2000,
            encoder: EncoderSection::default(),
            variant: Variant::EmbedSubtractDuo,
            train: TrainSection::default(),
            split: SplitSpec::Temporal {
                train_fraction: DEFAULT_TRAIN_FRACTION,
                test_start: None,
            },
            nvf_ratio: Some(DEFAULT_NVF_RATIO),
            l_values: DEFAULT_L_VALUES.to_vec(),
            seed: 0,
        }
    }
}

/// Values given on the command line; each one wins over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub variant: Option<Variant>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Defaults, then `path` (relative paths resolved against its
    /// directory), then `overrides`.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                let mut cfg: RunConfig = serde_json::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", p.display())))?;
                let base = p.parent().unwrap_or(Path::new(""));
                cfg.rebase(base);
                cfg
            }
        };
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(k) = overrides.k {
            cfg.k = k;
        }
        if let Some(v) = overrides.variant {
            cfg.variant = v;
        }
        if let Some(out) = &overrides.out {
            cfg.workdir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.repos.iter_mut().for_each(|r| join(&mut r.path));
        if let Some(l) = &mut self.labels {
            join(l);
        }
        join(&mut self.workdir);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        if let Some(l) = self.l_values.iter().find(|l| !(**l > 0.0 && **l <= 100.0)) {
            return usage(format!("L value {l} outside (0, 100]"));
        }
        if self.nvf_ratio.is_some_and(|r| !(r.is_finite() && r > 0.0)) {
            return usage("nvf_ratio must be positive".into());
        }
        if self.vocab_size < deltafix_core::tokenizer::MIN_VOCAB_SIZE {
            return usage(format!(
                "vocab_size must be at least {}",
                deltafix_core::tokenizer::MIN_VOCAB_SIZE
            ));
        }
        let mut ids: Vec<&str> = self.repos.iter().map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return usage(format!("repository id `{}` listed twice", w[0]));
        }
        self.train_config().validate().map_err(|e| CliError::Usage(e.to_string()))?;
        EncoderConfig {
            vocab_size: deltafix_core::tokenizer::MIN_VOCAB_SIZE,
            ..self.encoder_config(0)
        }
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn time_range(&self) -> TimeRange {
        TimeRange {
            since: self.since.unwrap_or(i64::MIN),
            until: self.until.unwrap_or(i64::MAX),
        }
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            dim: self.encoder.dim,
            layers: self.encoder.layers,
            heads: self.encoder.heads,
            ffn_mult: self.encoder.ffn_mult,
            max_len: self.max_len,
        }
    }

    pub fn model_config(&self, variant: Variant, vocab_size: usize) -> ModelConfig {
        let encoder = self.encoder_config(vocab_size);
        ModelConfig {
            variant,
            encoder,
            head_hidden: self.encoder.head_hidden.unwrap_or(encoder.dim),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train_config_for(self.variant, self.k)
    }

    pub fn train_config_for(&self, variant: Variant, k: usize) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            max_steps: t.max_steps,
            seed: self.seed,
            k,
            max_len: self.max_len,
            variant,
            eval_train: false,
        }
    }

    /// Canonical JSON of the resolved configuration.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
