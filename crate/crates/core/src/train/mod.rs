//! Optimization loop: Adam on softmax cross-entropy, per-epoch metrics,
//! JSON-lines logging, and best-validation checkpointing.

mod adam;
mod checkpoint;
mod data;

pub use adam::Adam;
pub use checkpoint::{
    encode_checkpoint, load_checkpoint, load_checkpoint_into, save_checkpoint, Checkpoint, CheckpointConfig,
};
pub use data::{stack, Batch, ClipDataset, SampleMode};

use std::fs::{self, File};
use std::io::Write;
use std::path::PathBuf;
use std::sync::mpsc::sync_channel;

use serde::{Deserialize, Serialize};

use crate::dataset::make_batches;
use crate::error::{Error, Result};
use crate::metrics::{cross_entropy_metric, ConfusionMatrix, MetricsReport};
use crate::nn::softmax;
use crate::resnet::ResNet3d;
use crate::scalar::Scalar;
use crate::seed::derive_seed_path;
use crate::tensor::{Tape, Tensor};

/// Batches loaded ahead of the optimizer.
const PREFETCH_DEPTH: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub clip_seconds: f64,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    pub log_path: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 200,
            clip_seconds: 4.0,
            seed: 0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            log_path: PathBuf::from("train_log.jsonl"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be non-negative", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidConfig("batch size and epoch count must be at least 1".into()));
        }
        if !(self.clip_seconds.is_finite() && self.clip_seconds > 0.0) {
            return Err(Error::InvalidConfig(format!("clip length {} s must be positive", self.clip_seconds)));
        }
        Ok(())
    }

    pub fn best_checkpoint_path(&self) -> PathBuf {
        self.checkpoint_dir.join("best.tlck")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train: MetricsReport,
    pub val: MetricsReport,
}

/// Anything that maps a clip batch to `[B, classes]` logits.
pub trait Classifier<S: Scalar> {
    fn num_classes(&self) -> usize;
    /// `items` are the dataset indices of the rows.
    fn logits(&self, clips: &Tensor<S>, items: &[usize]) -> Result<Tensor<S>>;
}

impl<S: Scalar> Classifier<S> for ResNet3d<S> {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn logits(&self, clips: &Tensor<S>, _items: &[usize]) -> Result<Tensor<S>> {
        self.predict(clips)
    }
}

/// Confusion matrix plus softmax rows gathered over an epoch.
struct Accumulator {
    classes: usize,
    cm: ConfusionMatrix,
    probs: Vec<f64>,
    truth: Vec<usize>,
}

impl Accumulator {
    fn new(classes: usize) -> Self {
        Accumulator { classes, cm: ConfusionMatrix::new(classes), probs: Vec::new(), truth: Vec::new() }
    }

    fn add<S: Scalar>(&mut self, logits: &Tensor<S>, labels: &[usize]) -> Result<()> {
        if logits.shape() != [labels.len(), self.classes] {
            return Err(Error::ShapeMismatch { op: "metrics", lhs: logits.shape().to_vec(), rhs: vec![labels.len(), self.classes] });
        }
        if !logits.all_finite() {
            return Err(Error::NonFinite { op: "logits".into() });
        }
        let p = softmax(logits)?;
        let rows: Vec<f64> = p.data().iter().map(|x| x.as_f64()).collect();
        let pred: Vec<usize> = rows.chunks(self.classes).map(crate::metrics::argmax).collect();
        self.cm.accumulate(labels, &pred)?;
        self.probs.extend(rows);
        self.truth.extend_from_slice(labels);
        Ok(())
    }

    fn report(&self) -> Result<MetricsReport> {
        let ce = cross_entropy_metric(&self.probs, self.classes, &self.truth)?;
        MetricsReport::new(&self.cm, ce.mean)
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    derive_seed_path(seed, &[epoch as u64])
}

/// One optimizer step on a prepared batch; returns the training logits.
pub fn train_step<S: Scalar>(
    model: &mut ResNet3d<S>,
    opt: &mut Adam<S>,
    clips: &Tensor<S>,
    labels: &[usize],
    lr: f64,
) -> Result<(S, Tensor<S>)> {
    let mut tape = Tape::new();
    let x = tape.leaf(clips.clone());
    let (logits, vars) = model.forward_train(&mut tape, x)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let loss_value = tape.value(loss).item()?;
    if !loss_value.is_finite() {
        return Err(Error::NonFinite { op: format!("training loss {loss_value}") });
    }
    tape.backward(loss)?;
    let grads: Vec<Tensor<S>> = vars
        .iter()
        .map(|&v| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
        .collect();
    let logits = tape.value(logits).clone();
    drop(tape);
    let mut params = Vec::with_capacity(grads.len());
    model.visit_params_mut(&mut |_, t| params.push(t));
    opt.step(&mut params, &grads, lr)?;
    Ok((loss_value, logits))
}

/// One shuffled pass over `data` with augmentation. Batches are prepared on
/// a loader thread while the previous step runs.
pub fn train_epoch<S: Scalar>(
    model: &mut ResNet3d<S>,
    opt: &mut Adam<S>,
    data: &ClipDataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Empty("training split has no clips".into()));
    }
    let seed = epoch_seed(cfg.seed, epoch);
    let batches = make_batches(data.len(), cfg.batch_size, Some(seed))?;
    let mut acc = Accumulator::new(data.num_classes());
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel(PREFETCH_DEPTH);
        scope.spawn(move || {
            for items in batches {
                if tx.send(data.load_batch::<S>(&items, SampleMode::Train { seed })).is_err() {
                    break;
                }
            }
        });
        for batch in rx {
            let batch = batch?;
            let (_, logits) = train_step(model, opt, &batch.clips, &batch.labels, cfg.learning_rate)?;
            acc.add(&logits, &batch.labels)?;
        }
        Ok(())
    })?;
    acc.report()
}

/// Deterministic pass in eval mode; `model` is not modified.
pub fn evaluate<S: Scalar, C: Classifier<S> + ?Sized>(model: &C, data: &ClipDataset, batch_size: usize) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation split has no clips".into()));
    }
    if model.num_classes() != data.num_classes() {
        return Err(Error::InvalidConfig(format!(
            "model predicts {} classes, data has {}",
            model.num_classes(),
            data.num_classes()
        )));
    }
    let mut acc = Accumulator::new(data.num_classes());
    for items in make_batches(data.len(), batch_size, None)? {
        let batch = data.load_batch::<S>(&items, SampleMode::Eval)?;
        let logits = model.logits(&batch.clips, &batch.items)?;
        acc.add(&logits, &batch.labels)?;
    }
    acc.report()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub records: Vec<EpochRecord>,
    pub best_checkpoint: Option<PathBuf>,
    pub best_epoch: Option<usize>,
    pub checkpoints_written: usize,
}

/// Alternates training and validation for `cfg.max_epochs` epochs, logging
/// every record and checkpointing whenever validation macro F1 improves.
pub fn fit<S: Scalar>(
    model: &mut ResNet3d<S>,
    opt: &mut Adam<S>,
    train: &ClipDataset,
    val: &ClipDataset,
    cfg: &TrainConfig,
    ck_config: &CheckpointConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.checkpoint_dir)
        .map_err(|e| Error::io(format!("creating {}", cfg.checkpoint_dir.display()), e))?;
    if let Some(dir) = cfg.log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let log_ctx = || format!("writing log {}", cfg.log_path.display());
    let mut log = File::create(&cfg.log_path).map_err(|e| Error::io(log_ctx(), e))?;
    let mut out = FitOutcome { records: Vec::new(), best_checkpoint: None, best_epoch: None, checkpoints_written: 0 };
    let mut best_f1 = f64::NEG_INFINITY;
    for epoch in 1..=cfg.max_epochs {
        let train_report = train_epoch(model, opt, train, cfg, epoch)?;
        let val_report = evaluate(&*model, val, cfg.batch_size)?;
        let record = EpochRecord { epoch, train: train_report, val: val_report };
        let line = serde_json::to_string(&record).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| Error::io(log_ctx(), e))?;
        if record.val.f1_macro > best_f1 {
            best_f1 = record.val.f1_macro;
            let path = cfg.best_checkpoint_path();
            save_checkpoint(&path, ck_config, model, opt)?;
            out.best_checkpoint = Some(path);
            out.best_epoch = Some(epoch);
            out.checkpoints_written += 1;
        }
        on_epoch(&record);
        out.records.push(record);
    }
    Ok(out)
}
