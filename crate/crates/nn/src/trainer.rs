//! Two-stage training: Model S on (signal patch → tensor patch), then
//! Model ST with the Model S parameters frozen.
//!
//! Per-patch losses and gradients are computed in parallel, then summed in
//! dataset order so results do not depend on the thread count.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tensorformer_core::rng::{purpose, stream};

use crate::autodiff::{Gradients, Init, Matrix, Parameter, ParamStore, Tape};
use crate::dataset::Dataset;
use crate::error::{NnError, Result};
use crate::transformer::{ModelS, ModelST, TensorModel};

/// Draws He-normal weights `N(0, 2 / fan_in)` (fan-in = rows) and resets
/// zero/one-initialized arrays, for every parameter accepted by `filter`.
/// Parameter `k` draws from its own stream, so the result depends only on
/// the seed and the parameter layout.
pub fn he_initialize(store: &mut ParamStore, seed: u64, filter: impl Fn(&Parameter) -> bool) {
    for (k, p) in store.iter_mut().enumerate() {
        if !filter(p) {
            continue;
        }
        match p.init {
            Init::Zeros => p.value.fill(0.0),
            Init::Ones => p.value.fill(1.0),
            Init::He => {
                let sd = (2.0 / p.value.nrows() as f64).sqrt();
                let normal = Normal::new(0.0, sd).expect("positive sd");
                let mut rng = stream(seed, purpose::INIT, k as u64);
                p.value.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
            }
        }
    }
}

/// Squared error summed over the patch and channels.
pub fn loss_mse(pred: &Matrix, target: &Matrix) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(NnError::Config(format!(
            "prediction {:?} and reference {:?} differ in shape",
            pred.dim(),
            target.dim()
        )));
    }
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_decay: f64,
    /// Non-improving epochs between learning-rate decays.
    pub plateau_patience: usize,
    /// Consecutive non-improving epochs before stopping.
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            initial_lr: 1e-4,
            lr_decay: 0.9,
            plateau_patience: 1,
            early_stop_patience: 2,
            max_epochs: 50,
            seed: 0,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NnError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad(format!("lr_decay {} must lie in (0, 1)", self.lr_decay));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("initial_lr {} must be positive", self.initial_lr));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 || self.max_epochs == 0 {
            return bad("patience values and max_epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} must lie in [0, 1)", self.val_fraction));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || store.iter().map(|p| Matrix::zeros(p.value.dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of every trainable parameter from its `grad` buffer.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
    pub checkpoint: Option<PathBuf>,
}

impl TrainLog {
    /// One JSON object per epoch followed by a summary line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&serde_json::json!({
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stop_reason": self.stop_reason,
            "checkpoint": self.checkpoint,
        }))?);
        out.push('\n');
        Ok(out)
    }
}

/// Replaces the measured validation loss of an epoch; used to inject
/// stalls in tests.
pub type ValidationHook<'a> = &'a mut dyn FnMut(usize, f64) -> f64;

trait Objective: Sync {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Loss for pair `i`, with gradients when requested.
    fn loss(&self, i: usize, grad: bool) -> Result<(f64, Option<Gradients>)>;
}

fn check_finite(loss: f64, epoch: usize, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(NnError::Training(format!(
            "non-finite {what} loss ({loss}) in epoch {epoch}; try a smaller learning rate"
        )))
    }
}

fn mean_loss(obj: &impl Objective, idx: &[usize]) -> Result<f64> {
    let losses = idx
        .par_iter()
        .map(|&i| obj.loss(i, false).map(|(l, _)| l))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / idx.len() as f64)
}

fn run(obj: &mut impl Objective, data: &Dataset, cfg: &TrainConfig, mut hook: Option<ValidationHook>) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(NnError::Training("empty dataset".into()));
    }
    let (mut train, val) = data.split(cfg.val_fraction);
    let mut adam = Adam::new(obj.store(), cfg.initial_lr);
    let mut best: Option<(usize, f64, Vec<Matrix>)> = None;
    let mut stalls = 0;
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        train.shuffle(&mut stream(cfg.seed, purpose::SHUFFLE, epoch as u64));
        let mut total = 0.0;
        for batch in train.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| obj.loss(i, true))
                .collect::<Result<Vec<_>>>()?;
            let batch_loss: f64 = results.iter().map(|r| r.0).sum();
            check_finite(batch_loss, epoch, "training")?;
            total += batch_loss;
            let grads = results.iter().filter_map(|r| r.1.as_ref());
            obj.store_mut().load_gradients(grads, 1.0 / batch.len() as f64);
            adam.step(obj.store_mut());
        }
        let train_loss = total / train.len() as f64;
        let mut val_loss = if val.is_empty() { train_loss } else { mean_loss(obj, &val)? };
        if let Some(h) = hook.as_mut() {
            val_loss = h(epoch, val_loss);
        }
        check_finite(val_loss, epoch, "validation")?;
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: adam.lr,
        });

        if best.as_ref().map_or(true, |b| val_loss < b.1) {
            let snapshot = obj.store().iter().map(|p| p.value.clone()).collect();
            best = Some((epoch, val_loss, snapshot));
            stalls = 0;
        } else {
            stalls += 1;
            if stalls % cfg.plateau_patience == 0 {
                adam.lr *= cfg.lr_decay;
            }
            if stalls >= cfg.early_stop_patience {
                stop_reason = StopReason::EarlyStop;
                break;
            }
        }
    }

    let (best_epoch, best_val_loss, snapshot) = best.expect("at least one epoch");
    for (p, v) in obj.store_mut().iter_mut().zip(snapshot) {
        p.value = v;
    }
    Ok(TrainLog {
        epochs,
        best_epoch,
        best_val_loss,
        stop_reason,
        checkpoint: None,
    })
}

struct SObjective<'a> {
    model: ModelS,
    data: &'a Dataset,
}

impl Objective for SObjective<'_> {
    fn store(&self) -> &ParamStore {
        &self.model.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.model.store
    }

    fn loss(&self, i: usize, grad: bool) -> Result<(f64, Option<Gradients>)> {
        let pair = &self.data.pairs[i];
        let mut tape = Tape::new();
        let x = tape.input(pair.signals.clone());
        let y = self.model.forward(&mut tape, x)?;
        let l = tape.squared_error(y, &pair.target)?;
        let value = tape.value(l)?[[0, 0]];
        let g = if grad { Some(tape.backward(l, &self.model.store)?) } else { None };
        Ok((value, g))
    }
}

struct StObjective<'a> {
    model: ModelST,
    data: &'a Dataset,
    stage_one: Vec<Matrix>,
}

impl Objective for StObjective<'_> {
    fn store(&self) -> &ParamStore {
        &self.model.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.model.store
    }

    fn loss(&self, i: usize, grad: bool) -> Result<(f64, Option<Gradients>)> {
        let pair = &self.data.pairs[i];
        let mut tape = Tape::new();
        let x = tape.input(pair.signals.clone());
        let t = tape.input(self.stage_one[i].clone());
        let y = self.model.forward(&mut tape, x, t)?;
        let l = tape.squared_error(y, &pair.target)?;
        let value = tape.value(l)?[[0, 0]];
        let g = if grad { Some(tape.backward(l, &self.model.store)?) } else { None };
        Ok((value, g))
    }
}

/// Trains `model` in place and returns the log. The model ends at its
/// best-validation parameters.
pub fn train_model_s(model: ModelS, data: &Dataset, cfg: &TrainConfig) -> Result<(ModelS, TrainLog)> {
    train_model_s_with(model, data, cfg, None)
}

pub fn train_model_s_with(
    model: ModelS,
    data: &Dataset,
    cfg: &TrainConfig,
    hook: Option<ValidationHook>,
) -> Result<(ModelS, TrainLog)> {
    check_dataset(data, model.config.seq_len(), model.config.signal_channels)?;
    let mut obj = SObjective { model, data };
    let log = run(&mut obj, data, cfg, hook)?;
    Ok((obj.model, log))
}

/// Trains a fresh second stage around the frozen `model_s`. The
/// first-stage output for every patch is computed once up front; the
/// frozen parameters make this identical to recomputing it each step.
pub fn train_model_st(model_s: &ModelS, data: &Dataset, cfg: &TrainConfig) -> Result<(ModelST, TrainLog)> {
    train_model_st_with(ModelST::new(model_s, cfg.seed)?, model_s, data, cfg, None)
}

pub fn train_model_st_with(
    model: ModelST,
    model_s: &ModelS,
    data: &Dataset,
    cfg: &TrainConfig,
    hook: Option<ValidationHook>,
) -> Result<(ModelST, TrainLog)> {
    if model.config != model_s.config {
        return Err(NnError::Checkpoint("Model ST and Model S configurations differ".into()));
    }
    let before = model_s.hash();
    if model.model_s_hash() != before {
        return Err(NnError::Checkpoint(
            "Model ST does not embed the supplied Model S parameters".into(),
        ));
    }
    check_dataset(data, model.config.seq_len(), model.config.signal_channels)?;
    let stage_one = data
        .pairs
        .par_iter()
        .map(|p| model_s.predict_patch(&p.signals))
        .collect::<Result<Vec<_>>>()?;
    let mut obj = StObjective {
        model,
        data,
        stage_one,
    };
    let log = run(&mut obj, data, cfg, hook)?;
    if obj.model.model_s_hash() != before || model_s.hash() != before {
        return Err(NnError::Training("first-stage parameters changed during second-stage training".into()));
    }
    Ok((obj.model, log))
}

fn check_dataset(data: &Dataset, n: usize, channels: usize) -> Result<()> {
    if let Some(p) = data.pairs.iter().find(|p| p.signals.dim() != (n, channels) || p.target.dim() != (n, 6)) {
        return Err(NnError::Config(format!(
            "patch at {:?} has signals {:?} / targets {:?}; the model expects ({n}, {channels}) / ({n}, 6)",
            p.origin,
            p.signals.dim(),
            p.target.dim()
        )));
    }
    Ok(())
}
