//! SGD with momentum, the step learning-rate schedule, per-epoch metrics and
//! resumable checkpoints.
//!
//! All randomness during training (batch order, crop offsets, flips) is drawn
//! from streams keyed by `(seed, epoch, batch)`, so the state needed to resume
//! is the parameters, the momentum buffers, the epoch counter and the metrics
//! recorded so far.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TensorEntry, CHECKPOINT_VERSION};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{augment_batch, batches, normalize_batch, sequential_batches, AugmentPolicy, Batch, Dataset};
use crate::error::{Error, Result};
use crate::model_zoo::{Model, ModelSpec};
use crate::nn_ops::{Ctx, Mode};
use crate::tensor::{derive_seed, ParamStore, Scalar, Tape, Tensor};

/// Piecewise-constant learning rate: `rates[i]` applies from
/// `boundaries[i - 1]` (or epoch 0) up to, not including, `boundaries[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub boundaries: Vec<usize>,
    pub rates: Vec<f64>,
}

impl LrSchedule {
    pub fn new(boundaries: Vec<usize>, rates: Vec<f64>) -> Result<Self> {
        let s = LrSchedule { boundaries, rates };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rates.len() != self.boundaries.len() + 1 {
            return Err(Error::Config(format!(
                "{} boundaries need {} rates, got {}",
                self.boundaries.len(),
                self.boundaries.len() + 1,
                self.rates.len()
            )));
        }
        if self.boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("schedule boundaries {:?} are not strictly increasing", self.boundaries)));
        }
        if self.rates.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::Config(format!("learning rates {:?} must be positive", self.rates)));
        }
        Ok(())
    }

    /// Epochs are counted from 0.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.rates[self.boundaries.iter().filter(|&&b| b <= epoch).count()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub batch_size: usize,
    /// L2 coefficient added to the gradient of convolution and linear weights.
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Random crop and flip on training batches.
    pub augment: bool,
    /// Batch size used for evaluation.
    pub eval_batch_size: usize,
}

impl TrainConfig {
    /// 200 epochs at 0.1, divided by ten at epochs 100 and 150; momentum
    /// 0.9, batch 128, weight decay 1e-4.
    pub fn standard(seed: u64) -> Self {
        TrainConfig {
            epochs: 200,
            schedule: LrSchedule { boundaries: vec![100, 150], rates: vec![0.1, 0.01, 0.001] },
            momentum: 0.9,
            batch_size: 128,
            weight_decay: 1e-4,
            seed,
            precision: Precision::F32,
            augment: true,
            eval_batch_size: 500,
        }
    }

    /// Ten epochs with a single drop at epoch 8.
    pub fn smoke(seed: u64) -> Self {
        TrainConfig { epochs: 10, schedule: LrSchedule { boundaries: vec![8], rates: vec![0.1, 0.01] }, ..Self::standard(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "momentum {} must lie in [0, 1) and weight decay {} must be non-negative",
                self.momentum, self.weight_decay
            )));
        }
        Ok(())
    }

    fn shuffle_seed(&self) -> u64 {
        derive_seed(self.seed, &[1])
    }

    fn augment_seed(&self) -> u64 {
        derive_seed(self.seed, &[2])
    }
}

/// Momentum buffers, one per learnable parameter, created lazily.
#[derive(Clone, Debug, Default)]
pub struct SgdState<T> {
    pub velocity: Vec<Option<Tensor<T>>>,
    pub step: usize,
}

/// `v = momentum·v + (g + wd·p)`, `p = p − lr·v`. Decay applies to weights
/// only. Nothing is updated if any gradient is non-finite.
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut SgdState<T>, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    for (_, p) in store.iter().filter(|(_, p)| p.learnable()) {
        let g = p.grad().ok_or_else(|| Error::Contract(format!("parameter `{}` has no gradient", p.name())))?;
        if g.first_non_finite().is_some() {
            return Err(Error::NonFiniteGradient { param: p.name().to_string(), step: state.step });
        }
    }
    state.velocity.resize_with(store.len(), || None);
    let (lr, mom, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
    for (p, v) in store.iter_mut().zip(state.velocity.iter_mut()) {
        if !p.learnable() {
            continue;
        }
        let decay = if p.decayed() { wd } else { T::zero() };
        let g = p.grad().expect("checked above").clone();
        let v = v.get_or_insert_with(|| Tensor::zeros(g.shape()));
        let w = p.value_mut();
        for ((vi, &gi), wi) in v.data_mut().iter_mut().zip(g.data()).zip(w.data_mut()) {
            *vi = mom * *vi + gi + decay * *wi;
            *wi -= lr * *vi;
        }
    }
    state.step += 1;
    Ok(())
}

/// One row of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Counted from 1.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    /// `1 − accuracy` on the evaluation split.
    pub test_error: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,test_error,lr,wall_seconds";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{:.3}", self.epoch, self.train_loss, self.train_acc, self.test_error, self.lr, self.wall_seconds)
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// Top-1 predictions in evaluation mode.
pub fn predict<T: Scalar>(model: &Model, store: &mut ParamStore<T>, batch: &Batch<T>) -> Result<Vec<usize>> {
    let mut tape = Tape::inference();
    let x = tape.input(batch.images.clone());
    let mut ctx = Ctx::new(&mut tape, store, Mode::Eval);
    let y = model.forward(&mut ctx, x)?;
    let k = model.spec().num_classes;
    Ok(tape.value(y).data().chunks_exact(k).map(argmax).collect())
}

/// Top-1 error over the whole dataset with running batch-norm statistics
/// and normalisation only.
pub fn evaluate<T: Scalar>(model: &Model, store: &mut ParamStore<T>, dataset: &Dataset, policy: &AugmentPolicy, batch_size: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Contract("evaluation on an empty dataset".into()));
    }
    let mut wrong = 0usize;
    for idx in sequential_batches(dataset.len(), batch_size) {
        let batch = normalize_batch(&dataset.gather::<T>(&idx)?, policy);
        let pred = predict(model, store, &batch)?;
        wrong += pred.iter().zip(&batch.labels).filter(|(p, l)| p != l).count();
    }
    Ok(wrong as f64 / dataset.len() as f64)
}

/// Outcome of a completed run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub metrics: Vec<MetricsRecord>,
    pub min_test_error: f64,
    pub final_test_error: f64,
}

impl TrainReport {
    fn from_metrics(metrics: Vec<MetricsRecord>) -> Self {
        let min_test_error = metrics.iter().map(|m| m.test_error).fold(f64::INFINITY, f64::min);
        let final_test_error = metrics.last().map_or(f64::NAN, |m| m.test_error);
        TrainReport { metrics, min_test_error, final_test_error }
    }
}

/// Training state: model, parameters, optimiser and history.
pub struct Trainer<T> {
    pub model: Model,
    pub store: ParamStore<T>,
    pub config: TrainConfig,
    pub sgd: SgdState<T>,
    /// Completed epochs.
    pub epoch: usize,
    pub metrics: Vec<MetricsRecord>,
    pub policy: AugmentPolicy,
    out_dir: Option<PathBuf>,
}

/// Consecutive epochs above ten times the first epoch's loss that abort a run.
const DIVERGENCE_EPOCHS: usize = 3;

impl<T: Scalar> Trainer<T> {
    /// Fresh model initialised from `config.seed`.
    pub fn new(spec: ModelSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, store) = Model::new(spec, config.seed)?;
        let policy = AugmentPolicy::cifar(config.augment_seed());
        Ok(Trainer { model, store, config, sgd: SgdState::default(), epoch: 0, metrics: Vec::new(), policy, out_dir: None })
    }

    /// Writes `metrics.csv` and `checkpoint.bin` under `dir` after every epoch.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        self.out_dir = Some(dir);
        Ok(self)
    }

    pub fn out_dir(&self) -> Option<&Path> {
        self.out_dir.as_deref()
    }

    /// One pass over `train`; returns mean loss and accuracy.
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<(f64, f64)> {
        let lr = self.config.schedule.lr_at(self.epoch);
        let order = batches(train, self.config.batch_size, self.config.shuffle_seed(), self.epoch)?;
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (bi, idx) in order.iter().enumerate() {
            let raw = train.gather::<T>(idx)?;
            let batch = if self.config.augment {
                augment_batch(&raw, &self.policy, self.epoch, bi)?
            } else {
                normalize_batch(&raw, &self.policy)
            };
            let mut tape = Tape::new();
            let x = tape.input(batch.images);
            let mut ctx = Ctx::new(&mut tape, &mut self.store, Mode::Train);
            let logits = self.model.forward(&mut ctx, x)?;
            let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
            let lv = tape.value(loss).data()[0].as_f64();
            let k = self.model.spec().num_classes;
            correct += tape.value(logits).data().chunks_exact(k).map(argmax).zip(&batch.labels).filter(|(p, l)| p == *l).count();
            loss_sum += lv * idx.len() as f64;
            self.store.zero_grad();
            tape.backward(loss, &mut self.store)?;
            drop(tape);
            sgd_step(&mut self.store, &mut self.sgd, lr, self.config.momentum, self.config.weight_decay)?;
        }
        Ok((loss_sum / train.len() as f64, correct as f64 / train.len() as f64))
    }

    /// Trains until `config.epochs` epochs are complete, evaluating on
    /// `test` after each one.
    pub fn run(&mut self, train: &Dataset, test: &Dataset) -> Result<TrainReport> {
        while self.epoch < self.config.epochs {
            let started = Instant::now();
            let lr = self.config.schedule.lr_at(self.epoch);
            let (train_loss, train_acc) = self.train_epoch(train)?;
            let test_error = evaluate(&self.model, &mut self.store, test, &self.policy, self.config.eval_batch_size)?;
            self.epoch += 1;
            let record = MetricsRecord { epoch: self.epoch, train_loss, train_acc, test_error, lr, wall_seconds: started.elapsed().as_secs_f64() };
            log::info!("{}", record.csv_row());
            self.metrics.push(record);
            if let Some(dir) = &self.out_dir {
                let path = dir.join("metrics.csv");
                write_atomic(&path, metrics_csv(&self.metrics).as_bytes())?;
            }
            if let Some(err) = self.divergence() {
                return Err(err);
            }
            if let Some(dir) = &self.out_dir {
                save_checkpoint(&dir.join("checkpoint.bin"), &self.checkpoint())?;
            }
        }
        Ok(TrainReport::from_metrics(self.metrics.clone()))
    }

    fn divergence(&self) -> Option<Error> {
        let initial = self.metrics.first()?.train_loss;
        let tail = self.metrics.iter().rev().take(DIVERGENCE_EPOCHS);
        let diverged = self.metrics.len() > DIVERGENCE_EPOCHS && tail.clone().all(|m| !(m.train_loss <= 10.0 * initial));
        let last = self.metrics.last()?;
        diverged.then_some(Error::Diverged { epoch: last.epoch, loss: last.train_loss, initial })
    }

    pub fn report(&self) -> TrainReport {
        TrainReport::from_metrics(self.metrics.clone())
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::capture(self)
    }

    /// Rebuilds a trainer at the state stored in `ck`.
    pub fn resume(ck: Checkpoint<T>) -> Result<Self> {
        let mut t = Trainer::new(ck.spec.clone(), ck.config.clone())?;
        ck.restore_into(&mut t)?;
        Ok(t)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
