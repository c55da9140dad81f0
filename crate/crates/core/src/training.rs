//! Distillation loss, learning-rate schedule, optimizer, and the training loop.

use std::io::Write;
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::FeaturePyramid;
use crate::datasets::{DatasetSplit, ImageSample};
use crate::error::{Error, Result};
use crate::model::GTrans;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub weight_decay: f64,
    pub decay_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 300, batch_size: 32, lr_init: 1e-3, weight_decay: 1e-4, decay_rate: 0.9 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("training.epochs and training.batch_size must be positive"));
        }
        if !(self.lr_init > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::config("training.lr_init must be positive and weight_decay non-negative"));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::config("training.decay_rate must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Half squared channel distance per pixel: `(B, C, H, W) × 2 -> (B, H, W)`.
pub fn pixel_loss(guide: &Tensor, mapped: &Tensor) -> Result<Tensor> {
    if guide.dims() != mapped.dims() {
        return Err(Error::shape(format!("pixel loss over {:?} vs {:?}", guide.dims(), mapped.dims())));
    }
    Ok(((guide - mapped)?.sqr()?.sum(1)? * 0.5)?)
}

/// Sum over layers of the spatial mean of [`pixel_loss`], averaged over the batch.
pub fn total_loss(guide: &FeaturePyramid, mapped: &FeaturePyramid) -> Result<Tensor> {
    guide.ensure_aligned(mapped)?;
    let mut terms = Vec::with_capacity(guide.len());
    for (g, m) in guide.layers.iter().zip(&mapped.layers) {
        terms.push(pixel_loss(g, m)?.mean_all()?);
    }
    Ok(Tensor::stack(&terms, 0)?.sum_all()?)
}

/// `lr_init · rate^(step / total_steps)`.
pub fn lr_at(step: usize, total_steps: usize, lr_init: f64, rate: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::config("total_steps must be positive"));
    }
    if step > total_steps {
        return Err(Error::InvalidInput(format!("step {step} exceeds total_steps {total_steps}")));
    }
    Ok(lr_init * rate.powf(step as f64 / total_steps as f64))
}

/// Adam with coupled (L2) weight decay.
pub struct Adam {
    vars: Vec<Var>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, weight_decay: f64) -> Result<Self> {
        let first = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let second = first.clone();
        Ok(Self { vars, first, second, step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay })
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, var) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let theta = var.as_tensor();
            let g = if self.weight_decay > 0.0 { (g + (theta * self.weight_decay)?)? } else { g.clone() };
            let m = ((&self.first[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&self.second[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            var.set(&(theta - (update * lr)?)?)?;
            self.first[i] = m;
            self.second[i] = v;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn train_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }

    /// `epoch,train_loss,val_loss,lr` rows; wall time is left out so reruns compare equal.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "val_loss", "lr"])?;
        for r in &self.records {
            w.write_record([r.epoch.to_string(), r.train_loss.to_string(), r.val_loss.to_string(), r.lr.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub steps: usize,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Mean per-image loss in inference mode.
pub fn evaluate_loss(model: &GTrans, samples: &[ImageSample], batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidData("cannot evaluate the loss of an empty set".into()));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let out = model.forward(&model.batch_tensor(&refs)?, false)?;
        total += scalar(&total_loss(&out.guide, out.mapped())?)? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Mini-batch Adam over the distillation loss. The best state by validation
/// loss (training loss when there is no validation split) is restored into
/// `model` before returning.
pub fn train(
    model: &GTrans,
    data: &DatasetSplit,
    config: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::InvalidData("training split is empty".into()));
    }
    if data.train.iter().chain(&data.val).any(|s| s.label != crate::datasets::Label::Normal) {
        return Err(Error::InvalidData("train and validation splits must contain only normal images".into()));
    }
    let batches_per_epoch = data.train.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let mut opt = Adam::new(model.trainable_vars(), config.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_6169_6e);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, Vec<(String, Tensor)>)> = None;
    let mut step = 0usize;
    let clock = Instant::now();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = config.lr_init;
        for batch_idx in order.chunks(config.batch_size) {
            let refs: Vec<&ImageSample> = batch_idx.iter().map(|&i| &data.train[i]).collect();
            let out = model.forward(&model.batch_tensor(&refs)?, true)?;
            let loss = total_loss(&out.guide, out.mapped())?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            let grads = loss.backward()?;
            lr = lr_at(step, total_steps, config.lr_init, config.decay_rate)?;
            opt.step(&grads, lr)?;
            step += 1;
            epoch_loss += value * refs.len() as f64;
        }
        let train_loss = epoch_loss / data.train.len() as f64;
        let val_loss = if data.val.is_empty() {
            train_loss
        } else {
            evaluate_loss(model, &data.val, config.batch_size)?
        };
        if !val_loss.is_finite() {
            return Err(Error::Diverged { step, loss: val_loss });
        }
        let record = EpochRecord { epoch, train_loss, val_loss, lr, wall_time_s: clock.elapsed().as_secs_f64() };
        on_epoch(&record);
        log.records.push(record);
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.store().export("")?));
        }
    }

    let (best_val_loss, best_epoch, snapshot) = best.expect("at least one epoch");
    let lookup = |key: &str| snapshot.iter().find(|(k, _)| k == key).map(|(_, t)| t.clone());
    model.store().import("", &lookup)?;
    Ok(TrainOutcome { log, best_epoch, best_val_loss, steps: step })
}
