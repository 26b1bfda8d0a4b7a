//! Per-window MSE regression onto class embeddings with Adam, plateau
//! learning-rate decay and early stopping.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{read_sequence, DataError, DatasetManifest};
use crate::nn::{adam_step, mse_loss, AdamState, Gradients, NnError, RegressorModel};
use crate::par::{self, Exec};
use crate::table::EmbeddingTable;
use crate::tensor::Tensor;
use crate::windowing::{segment, WindowConfig, WindowError};

/// Smallest drop in the monitored loss that counts as an improvement.
pub const MIN_IMPROVEMENT: f64 = 1e-6;

pub const MAX_EPOCHS: usize = 300;

/// Examples per gradient chunk. Chunks are summed in order, so the batch
/// gradient is the same however many threads run them.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("no training examples")]
    NoExamples,
    #[error("class {0} has no entry in the embedding table")]
    MissingTarget(String),
    #[error("record {0} has no class label")]
    Unlabeled(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr {lr})")]
    NonFinite { epoch: usize, batch: usize, lr: f64 },
    #[error("leakage: records of held-out classes in training input: {}", .0.join(", "))]
    Leakage(Vec<String>),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Window(#[from] WindowError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_patience_epochs: usize,
    pub early_stop_patience_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: MAX_EPOCHS,
            initial_lr: 1e-3,
            lr_decay_factor: 0.5,
            lr_patience_epochs: 10,
            early_stop_patience_epochs: 30,
            batch_size: 32,
            seed: 0,
            val_fraction: 0.15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.max_epochs == 0 || self.max_epochs > MAX_EPOCHS {
            return fail(format!("max_epochs must lie in [1, {MAX_EPOCHS}], got {}", self.max_epochs));
        }
        if !(self.initial_lr >= 0.0) || !self.initial_lr.is_finite() {
            return fail(format!("initial_lr must be finite and non-negative, got {}", self.initial_lr));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return fail(format!("lr_decay_factor must lie in (0, 1], got {}", self.lr_decay_factor));
        }
        if self.lr_patience_epochs == 0 || self.early_stop_patience_epochs == 0 {
            return fail("patience values must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 0.5) {
            return fail(format!("val_fraction must lie in (0, 0.5), got {}", self.val_fraction));
        }
        Ok(())
    }
}

/// One window with the embedding of its activity.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub record_id: String,
    pub class_id: String,
    pub window: Tensor,
    pub target: Tensor,
}

/// Windows every listed record and pairs each window with the table
/// embedding of the record's class.
pub fn make_examples<S: AsRef<str>>(
    manifest: &DatasetManifest,
    record_ids: &[S],
    table: &EmbeddingTable,
    cfg: &WindowConfig,
) -> Result<Vec<Example>, TrainError> {
    cfg.validate()?;
    let mut out = Vec::new();
    for id in record_ids {
        let record = manifest.record(id.as_ref())?;
        let class = record
            .class_id
            .clone()
            .ok_or_else(|| TrainError::Unlabeled(record.id.clone()))?;
        let entry = table.get(&class).ok_or_else(|| TrainError::MissingTarget(class.clone()))?;
        let target = Tensor::from_vec(&[entry.embedding.len()], entry.embedding.clone())?;
        let seq = read_sequence(manifest, &record.id)?.sequence;
        for w in segment(&seq, cfg)? {
            out.push(Example {
                record_id: record.id.clone(),
                class_id: class.clone(),
                window: w.samples,
                target: target.clone(),
            });
        }
    }
    Ok(out)
}

/// Fails if any example belongs to one of `held_out` classes.
pub fn check_leakage<S: AsRef<str>>(examples: &[Example], held_out: &[S]) -> Result<(), TrainError> {
    let held: HashSet<&str> = held_out.iter().map(AsRef::as_ref).collect();
    let leaked: BTreeSet<String> = examples
        .iter()
        .filter(|e| held.contains(e.class_id.as_str()))
        .map(|e| e.record_id.clone())
        .collect();
    if leaked.is_empty() {
        Ok(())
    } else {
        Err(TrainError::Leakage(leaked.into_iter().collect()))
    }
}

/// Record ids on each side of the validation split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Seeded shuffle of the distinct record ids; the first
/// `round(val_fraction · n)` (at least one) go to validation. A single
/// record cannot be split and stays in training.
pub fn split_records(examples: &[Example], val_fraction: f64, seed: u64) -> RecordSplit {
    let mut ids: Vec<String> = examples
        .iter()
        .map(|e| e.record_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if ids.len() < 2 {
        return RecordSplit {
            train: ids,
            val: Vec::new(),
        };
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_val = ((val_fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    let train = ids.split_off(n_val);
    RecordSplit { train, val: ids }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    EpochCap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-example loss over the epoch's batches.
    pub train_mse: f64,
    pub val_mse: Option<f64>,
    /// Rate used during this epoch.
    pub lr: f64,
}

impl EpochRecord {
    /// `epoch,train_mse,val_mse,lr`; a missing validation loss is empty.
    pub fn log_line(&self) -> String {
        let val = self.val_mse.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{}", self.epoch, self.train_mse, val, self.lr)
    }
}

pub const EPOCH_LOG_HEADER: &str = "epoch,train_mse,val_mse,lr";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Minimum of the monitored loss (validation, or training without a
    /// validation split).
    pub best_loss: f64,
    pub monitor: String,
    pub stop_reason: StopReason,
    pub split: RecordSplit,
    pub train_examples: usize,
    pub val_examples: usize,
}

impl TrainReport {
    pub fn epoch_log(&self) -> String {
        let mut out = String::from(EPOCH_LOG_HEADER);
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&e.log_line());
            out.push('\n');
        }
        out
    }
}

/// Per-example loss and its gradient with respect to the model output.
pub trait ExampleLoss: Sync {
    fn loss(&self, output: &Tensor, example: &Example) -> Result<(f64, Tensor), NnError>;
}

/// Squared error against the example's target embedding.
pub struct Mse;

impl ExampleLoss for Mse {
    fn loss(&self, output: &Tensor, example: &Example) -> Result<(f64, Tensor), NnError> {
        mse_loss(output, &example.target)
    }
}

fn chunk_gradients(
    model: &RegressorModel,
    batch: &[&Example],
    loss: &dyn ExampleLoss,
    scale: f64,
) -> Result<(f64, Gradients), NnError> {
    let mut total = Gradients::zeros(&model.config());
    let mut loss_sum = 0.0;
    for ex in batch {
        let (out, cache) = model.forward_pass(&ex.window)?;
        let (l, mut grad) = loss.loss(&out, ex)?;
        grad.scale(scale);
        let g = model.backward_pass(&cache, &grad)?;
        total.accumulate(&g);
        loss_sum += l;
    }
    Ok((loss_sum, total))
}

/// Mean loss of the batch and the gradient of that mean.
pub fn loss_gradients(
    model: &RegressorModel,
    batch: &[&Example],
    loss: &dyn ExampleLoss,
    exec: Exec,
) -> Result<(f64, Gradients), NnError> {
    let scale = 1.0 / batch.len() as f64;
    let parts = par::map_chunks(exec, batch, GRAD_CHUNK, |chunk| chunk_gradients(model, chunk, loss, scale));
    let mut total = Gradients::zeros(&model.config());
    let mut loss_sum = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss_sum += l;
        total.accumulate(&g);
    }
    Ok((loss_sum * scale, total))
}

/// [`loss_gradients`] for the regression loss.
pub fn batch_gradients(
    model: &RegressorModel,
    batch: &[&Example],
    exec: Exec,
) -> Result<(f64, Gradients), NnError> {
    loss_gradients(model, batch, &Mse, exec)
}

/// Mean per-example loss.
pub fn mean_loss(model: &RegressorModel, examples: &[&Example], exec: Exec) -> Result<f64, NnError> {
    let losses = par::map(exec, examples, |ex| {
        let out = model.predict(&ex.window)?;
        mse_loss(&out, &ex.target).map(|(l, _)| l)
    });
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / examples.len() as f64)
}

/// Trains in place and leaves the model at its best epoch. `on_epoch` sees
/// every epoch as it completes.
pub fn train(
    model: &mut RegressorModel,
    examples: &[Example],
    cfg: &TrainConfig,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(TrainError::NoExamples);
    }
    let split = split_records(examples, cfg.val_fraction, cfg.seed);
    let val_ids: HashSet<&str> = split.val.iter().map(String::as_str).collect();
    let (val, train): (Vec<&Example>, Vec<&Example>) =
        examples.iter().partition(|e| val_ids.contains(e.record_id.as_str()));
    if val.is_empty() {
        log::warn!("a single record cannot be split; early stopping monitors the training loss");
    }

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = AdamState::new(cfg.initial_lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.clone());
    let (mut since_best, mut since_decay) = (0usize, 0usize);
    let mut stop_reason = StopReason::EpochCap;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = idx.iter().map(|&i| train[i]).collect();
            let (loss, grads) = batch_gradients(model, &batch, exec)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    lr: adam.lr,
                });
            }
            loss_sum += loss * batch.len() as f64;
            let grad_refs: Vec<&Tensor> = grads.named_tensors().into_iter().map(|(_, t)| t).collect();
            adam_step(&mut model.parameters_mut(), &grad_refs, &mut adam)?;
        }
        let train_mse = loss_sum / train.len() as f64;
        let val_mse = if val.is_empty() {
            None
        } else {
            Some(mean_loss(model, &val, exec)?)
        };
        let record = EpochRecord {
            epoch,
            train_mse,
            val_mse,
            lr: adam.lr,
        };
        on_epoch(&record);
        epochs.push(record);

        let monitored = val_mse.unwrap_or(train_mse);
        if !monitored.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                batch: order.len().div_ceil(cfg.batch_size),
                lr: adam.lr,
            });
        }
        if monitored < best.0 - MIN_IMPROVEMENT {
            best = (monitored, epoch, model.clone());
            since_best = 0;
            since_decay = 0;
        } else {
            since_best += 1;
            since_decay += 1;
            if since_best >= cfg.early_stop_patience_epochs {
                stop_reason = StopReason::EarlyStop;
                break;
            }
            if since_decay >= cfg.lr_patience_epochs {
                adam.lr *= cfg.lr_decay_factor;
                since_decay = 0;
            }
        }
    }

    let (best_loss, best_epoch, best_model) = best;
    *model = best_model;
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_loss,
        monitor: if val.is_empty() { "train_mse" } else { "val_mse" }.to_string(),
        stop_reason,
        split,
        train_examples: train.len(),
        val_examples: val.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            in_channels: 2,
            filters: 3,
            kernel: 3,
            pool_size: 2,
            hidden: 4,
            out_dim: 5,
        }
    }

    fn example(record: &str, class: &str, phase: f64, target: f64) -> Example {
        let window = Tensor::from_vec(
            &[12, 2],
            (0..24).map(|i| ((i as f64) * 0.3 + phase).sin()).collect(),
        )
        .unwrap();
        Example {
            record_id: record.into(),
            class_id: class.into(),
            window,
            target: Tensor::full(&[5], target),
        }
    }

    fn dataset(records: usize) -> Vec<Example> {
        (0..records)
            .flat_map(|r| {
                let class = if r % 2 == 0 { "a" } else { "b" };
                let t = if r % 2 == 0 { 0.5 } else { -0.5 };
                (0..3).map(move |w| example(&format!("r{r}"), class, r as f64 + 0.1 * w as f64, t))
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        for bad in [
            TrainConfig { val_fraction: 0.5, ..Default::default() },
            TrainConfig { val_fraction: 0.0, ..Default::default() },
            TrainConfig { lr_patience_epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn split_keeps_records_whole() {
        let ex = dataset(20);
        let split = split_records(&ex, 0.15, 3);
        assert_eq!(split.val.len(), 3);
        assert_eq!(split.train.len(), 17);
        let val: HashSet<_> = split.val.iter().collect();
        assert!(split.train.iter().all(|r| !val.contains(r)));
    }

    #[test]
    fn single_record_trains_without_validation() {
        let ex = dataset(1);
        let mut model = RegressorModel::new(tiny(), 1).unwrap();
        let cfg = TrainConfig {
            max_epochs: 3,
            ..Default::default()
        };
        let report = train(&mut model, &ex, &cfg, Exec::Sequential, |_| {}).unwrap();
        assert_eq!(report.monitor, "train_mse");
        assert!(report.epochs.iter().all(|e| e.val_mse.is_none()));
        assert_eq!(report.epochs.len(), 3);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let ex = dataset(6);
        let mut model = RegressorModel::new(tiny(), 2).unwrap();
        let before = model.clone();
        let cfg = TrainConfig {
            max_epochs: 4,
            initial_lr: 0.0,
            ..Default::default()
        };
        train(&mut model, &ex, &cfg, Exec::Sequential, |_| {}).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn batch_gradient_is_mean_of_example_gradients() {
        let ex = dataset(3);
        let refs: Vec<&Example> = ex.iter().collect();
        let model = RegressorModel::new(tiny(), 4).unwrap();
        let (loss, g) = batch_gradients(&model, &refs, Exec::Sequential).unwrap();
        let mut oracle_loss = 0.0;
        let mut oracle = Gradients::zeros(&model.config());
        for e in &ex {
            let (out, cache) = model.forward_pass(&e.window).unwrap();
            let (l, grad) = mse_loss(&out, &e.target).unwrap();
            oracle_loss += l / ex.len() as f64;
            let mut gi = model.backward_pass(&cache, &grad).unwrap();
            gi.scale(1.0 / ex.len() as f64);
            oracle.accumulate(&gi);
        }
        assert!((loss - oracle_loss).abs() < 1e-12);
        for ((_, a), (_, b)) in g.named_tensors().iter().zip(oracle.named_tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn leakage_guard_names_records() {
        let ex = dataset(4);
        check_leakage(&ex, &["c"]).unwrap();
        match check_leakage(&ex, &["b"]) {
            Err(TrainError::Leakage(ids)) => assert_eq!(ids, vec!["r1", "r3"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn epoch_log_format() {
        let r = EpochRecord {
            epoch: 2,
            train_mse: 0.25,
            val_mse: None,
            lr: 0.001,
        };
        assert_eq!(r.log_line(), "2,0.25,,0.001");
    }
}
