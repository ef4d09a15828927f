//! Joint single-phase training of encoders and head.

mod checkpoint;
mod split;

pub use checkpoint::{
    from_bytes, load_checkpoint, save_checkpoint, to_bytes, Checkpoint, CheckpointError, CheckpointMeta, MAGIC,
    VERSION,
};
pub use split::{
    split_dataset, temporal_cut, Partition, SplitError, SplitSpec, Splits, TemporalCut, DEFAULT_TRAIN_FRACTION,
};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::change_builder::{ContextualChange, Variant, DEFAULT_CONTEXT_LINES};
use crate::delta_model::{accumulate_grad, bce, encode_input, DeltaModel, EncodedInput, ModelConfig, ModelError};
use crate::evaluation::{classification_metrics, CommitLabels};
use crate::inference::{aggregate, group_by_commit, CommitPrediction};
use crate::optim::{AdamW, AdamWConfig};
use crate::repo_miner::Label;
use crate::tokenizer::{TokenizerError, Vocabulary};

/// Examples per gradient work unit. Fixed so the summation order, and thus
/// the result, does not depend on the number of worker threads.
pub const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub k: usize,
    pub max_len: usize,
    pub variant: Variant,
    /// Also compute training-set F1 after every epoch.
    pub eval_train: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            learning_rate: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            epochs: 10,
            batch_size: 128,
            max_steps: None,
            seed: 0,
            k: DEFAULT_CONTEXT_LINES,
            max_len: 256,
            variant: Variant::EmbedSubtractDuo,
            eval_train: false,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay non-negative");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.max_steps == Some(0) {
            return bad("epochs, batch_size and max_steps must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("training set has no VF example")]
    NoVulnerabilityFixes,
    #[error("non-finite loss at step {step} (epoch {epoch}); batch: {}", batch_ids.join(", "))]
    NonFiniteLoss {
        step: usize,
        epoch: usize,
        batch_ids: Vec<String>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// One tokenized file-level training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub repo_id: String,
    pub commit_hash: String,
    pub path: String,
    pub loc: usize,
    pub label: Label,
    pub input: EncodedInput,
}

impl Example {
    pub fn id(&self) -> String {
        format!("{}/{}:{}", self.repo_id, &self.commit_hash, self.path)
    }
}

/// Render and tokenize built changes for `variant`. Order is preserved.
pub fn prepare_examples(
    changes: &[ContextualChange],
    variant: Variant,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<Example>, TokenizerError> {
    crate::par::map(changes, |cc| {
        Ok(Example {
            repo_id: cc.repo_id.clone(),
            commit_hash: cc.commit_hash.clone(),
            path: cc.path.clone(),
            loc: cc.loc(),
            label: cc.label,
            input: encode_input(cc, variant, vocab, max_len)?,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogSplit {
    Train,
    Val,
}

/// One row of the loss log: a training step or an end-of-epoch validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub split: LogSplit,
}

pub const LOSS_LOG_HEADER: &str = "step,epoch,loss,split";

pub fn write_loss_row(mut w: impl Write, r: &LossRecord) -> std::io::Result<()> {
    let split = match r.split {
        LogSplit::Train => "train",
        LogSplit::Val => "val",
    };
    writeln!(w, "{},{},{},{}", r.step, r.epoch, r.loss, split)
}

pub fn write_loss_csv(mut w: impl Write, records: &[LossRecord]) -> std::io::Result<()> {
    writeln!(w, "{LOSS_LOG_HEADER}")?;
    records.iter().try_for_each(|r| write_loss_row(&mut w, r))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Optimizer steps taken when the epoch ended.
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_f1: f64,
    pub train_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation F1.
    pub model: DeltaModel<f32>,
    pub best_epoch: usize,
    pub epochs: Vec<EpochSummary>,
    pub loss_log: Vec<LossRecord>,
    pub steps: usize,
}

/// Commit-level predictions, ground truth and mean file-level loss.
pub fn evaluate_examples(
    examples: &[Example],
    model: &DeltaModel<f32>,
) -> Result<(Vec<CommitPrediction>, CommitLabels, f64), ModelError> {
    let probs: Vec<f64> = crate::par::map(examples, |e| model.predict_file(&e.input))
        .into_iter()
        .collect::<Result<_, _>>()?;
    let loss = examples.iter().zip(&probs).map(|(e, &p)| bce(p, e.label)).sum::<f64>() / examples.len().max(1) as f64;
    let indexed: Vec<(usize, &Example)> = examples.iter().enumerate().collect();
    let mut preds = Vec::new();
    let mut labels = CommitLabels::new();
    for group in group_by_commit(&indexed, |(_, e)| (e.repo_id.as_str(), e.commit_hash.as_str())) {
        let first = group[0].1;
        let files = group.iter().map(|(i, e)| (e.path.clone(), probs[*i])).collect();
        let loc = group.iter().map(|(_, e)| e.loc).sum();
        preds.push(aggregate(&first.repo_id, &first.commit_hash, files, loc).expect("groups are non-empty"));
        labels.insert((first.repo_id.clone(), first.commit_hash.clone()), first.label);
    }
    Ok((preds, labels, loss))
}

fn commit_f1(examples: &[Example], model: &DeltaModel<f32>) -> Result<(f64, f64), ModelError> {
    let (preds, labels, loss) = evaluate_examples(examples, model)?;
    let m = classification_metrics(&preds, &labels).expect("labels come from the same examples");
    Ok((m.f1, loss))
}

/// Mean-loss gradient over one logical batch, summed chunk by chunk in a
/// fixed order. Returns the mean loss.
fn batch_gradient(
    items: &[(&EncodedInput, Label)],
    model: &DeltaModel<f32>,
) -> Result<(f64, DeltaModel<f32>), ModelError> {
    let chunks: Vec<_> = items.chunks(GRAD_CHUNK).collect();
    let parts = crate::par::map(&chunks, |chunk| {
        let mut g = model.zeros_like();
        accumulate_grad(chunk, model, items.len(), &mut g).map(|loss| (loss, g))
    });
    let mut total = model.zeros_like();
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        let mut flat = Vec::new();
        g.visit(|_, t| flat.push(t.data.clone()));
        let mut idx = 0;
        total.visit_mut(|_, t| {
            for (a, b) in t.data.iter_mut().zip(&flat[idx]) {
                *a += *b;
            }
            idx += 1;
        });
    }
    Ok((loss / items.len() as f64, total))
}

/// Train all parameters jointly with AdamW over epoch-shuffled batches.
/// `on_log` sees every loss record as it is produced.
pub fn train(
    train_set: &[Example],
    val_set: &[Example],
    model_config: ModelConfig,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LossRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if model_config.variant != cfg.variant || model_config.encoder.max_len != cfg.max_len {
        return Err(TrainError::InvalidConfig(
            "model variant/max_len disagree with the training config".into(),
        ));
    }
    if train_set.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }
    if !train_set.iter().any(|e| e.label.is_vf()) {
        return Err(TrainError::NoVulnerabilityFixes);
    }
    if let Some(e) = train_set.iter().chain(val_set).find(|e| e.input.variant != cfg.variant) {
        return Err(ModelError::VariantMismatch {
            input: e.input.variant,
            model: cfg.variant,
        }
        .into());
    }

    let mut model = DeltaModel::<f32>::init(model_config, cfg.seed)?;
    let mut opt = AdamW::new(cfg.adamw(), &model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, DeltaModel<f32>)> = None;
    let mut step = 0;

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<_> = batch.iter().map(|&i| (&train_set[i].input, train_set[i].label)).collect();
            let (loss, grads) = batch_gradient(&items, &model)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step: step + 1,
                    epoch,
                    batch_ids: batch.iter().map(|&i| train_set[i].id()).collect(),
                });
            }
            opt.step(&mut model, &grads);
            step += 1;
            epoch_loss += loss;
            epoch_steps += 1;
            let rec = LossRecord {
                step,
                epoch,
                loss,
                split: LogSplit::Train,
            };
            on_log(&rec);
            log.push(rec);
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
        }

        let (val_f1, val_loss) = commit_f1(val_set, &model)?;
        let rec = LossRecord {
            step,
            epoch,
            loss: val_loss,
            split: LogSplit::Val,
        };
        on_log(&rec);
        log.push(rec);
        let train_f1 = if cfg.eval_train {
            Some(commit_f1(train_set, &model)?.0)
        } else {
            None
        };
        log::info!("epoch {epoch} step {step}: val F1 {val_f1:.3}, val loss {val_loss:.4}");
        epochs.push(EpochSummary {
            epoch,
            step,
            train_loss: epoch_loss / epoch_steps.max(1) as f64,
            val_loss,
            val_f1,
            train_f1,
        });
        // Ties go to the later epoch.
        if best.as_ref().is_none_or(|(f1, _, _)| val_f1 >= *f1) {
            best = Some((val_f1, epoch, model.clone()));
        }
        if cfg.max_steps.is_some_and(|m| step >= m) {
            break 'epochs;
        }
    }

    let (_, best_epoch, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        best_epoch,
        epochs,
        loss_log: log,
        steps: step,
    })
}
