//! Losses, metrics, Adam with a plateau schedule, and the training loop.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dataset::Rollout;
use crate::error::{Error, Result};
use crate::features::{Batch, Featurizer};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::particles::Vec3;
use crate::tensor::{Precision, Scalar, Tensor};

/// `(1/N) Σ_i ‖a_i − b_i‖²` over `N × 3` rows.
pub fn mse(pred: &[Vec3], target: &[Vec3]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape("mse", &[pred.len(), 3], &[target.len(), 3]));
    }
    let total: f64 = pred.iter().zip(target).map(|(a, b)| sq_err(a, b)).sum();
    Ok(total / pred.len() as f64)
}

fn sq_err(a: &Vec3, b: &Vec3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Per-material mean squared errors, in material order.
pub fn material_mse(pred: &[Vec3], target: &[Vec3], material_ids: &[usize], num_materials: usize) -> Result<Vec<f64>> {
    if pred.len() != target.len() || pred.len() != material_ids.len() {
        return Err(Error::shape("material_mse", &[pred.len()], &[target.len(), material_ids.len()]));
    }
    let mut sums = vec![0.0; num_materials];
    let mut counts = vec![0usize; num_materials];
    for ((a, b), &m) in pred.iter().zip(target).zip(material_ids) {
        if m >= num_materials {
            return Err(Error::Input(format!("material id {m} out of range for {num_materials} materials")));
        }
        sums[m] += sq_err(a, b);
        counts[m] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Contract(format!("material {k} has no particles")));
    }
    Ok(sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect())
}

/// Mean over materials of the per-material mean squared error.
pub fn m3se(pred: &[Vec3], target: &[Vec3], material_ids: &[usize], num_materials: usize) -> Result<f64> {
    if num_materials == 0 {
        return Err(Error::Contract("m3se needs at least one material".into()));
    }
    let per = material_mse(pred, target, material_ids, num_materials)?;
    Ok(per.iter().sum::<f64>() / num_materials as f64)
}

/// Loss node `(1/N) Σ ‖out_i − target_i‖²`.
pub fn mse_loss<T: Scalar>(tape: &mut Tape<T>, out: Var, target: &Tensor<T>) -> Result<Var> {
    let rows = tape.value(out).rows();
    let t = tape.constant(target.clone());
    let diff = tape.sub(out, t)?;
    let sq = tape.square(diff);
    let total = tape.sum_all(sq);
    Ok(tape.scale(total, T::one() / T::from_f(rows as f64)))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update; `grads[k]` belongs to the `k`-th parameter of `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>]) {
        self.step += 1;
        let (b1, b2) = (T::from_f(self.beta1), T::from_f(self.beta2));
        let c1 = T::one() / (T::one() - b1.powi(self.step));
        let c2 = T::one() / (T::one() - b2.powi(self.step));
        let (lr, eps) = (T::from_f(self.lr), T::from_f(self.eps));
        for (k, (_, p)) in store.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for (((x, mi), vi), &gi) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *x = *x - lr * (*mi * c1) / ((*vi * c2).sqrt() + eps);
            }
        }
    }
}

/// Multiply the learning rate by `factor` after `patience` epochs without a
/// validation improvement larger than `tolerance`.
#[derive(Clone, Debug)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub tolerance: f64,
    best: f64,
    bad: usize,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize) -> Self {
        Plateau {
            factor,
            patience,
            tolerance: 1e-6,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Feed one validation loss, returning the learning rate to use next.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best - self.tolerance {
            self.best = loss;
            self.bad = 0;
            return lr;
        }
        self.bad += 1;
        if self.bad >= self.patience {
            self.bad = 0;
            return lr * self.factor;
        }
        lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Training samples drawn per epoch; 0 uses every sample.
    pub samples_per_epoch: usize,
    /// Validation samples, evenly spaced; 0 uses every sample.
    pub valid_samples: usize,
    /// Stop after the epoch that crosses this many seconds; 0 disables.
    pub time_budget_secs: f64,
    /// Restore the parameters of the best validation epoch at the end.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.0008,
            decay: 0.8,
            patience: 3,
            batch_size: 4,
            epochs: 20,
            seed: 0,
            precision: Precision::F32,
            samples_per_epoch: 0,
            valid_samples: 0,
            time_budget_secs: 0.0,
            keep_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config("learning_rate, batch_size and patience must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Config(format!("decay {} must lie in (0, 1)", self.decay)));
        }
        if !(self.time_budget_secs >= 0.0) {
            return Err(Error::Config("time_budget_secs must be non-negative".into()));
        }
        Ok(())
    }
}

/// One input/target pair: a system at frame `t` and its velocities at `t + 1`.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub batch: Batch<T>,
    pub target: Tensor<T>,
}

/// Every transition of every rollout, in rollout then frame order.
pub fn samples<T: Scalar>(featurizer: &Featurizer, rollouts: &[Rollout]) -> Result<Vec<Sample<T>>> {
    let mut out = Vec::new();
    for r in rollouts {
        for t in 0..r.frames() - 1 {
            out.push(Sample {
                batch: featurizer.rollout_batch(r, t)?,
                target: featurizer.target(&r.velocities(t + 1))?,
            });
        }
    }
    Ok(out)
}

fn stack_targets<T: Scalar>(parts: &[&Sample<T>]) -> Result<Tensor<T>> {
    let rows = parts.iter().map(|s| s.target.rows()).sum();
    Tensor::new(vec![rows, 3], parts.iter().flat_map(|s| s.target.data().iter().copied()).collect())
}

fn merge<T: Scalar>(parts: &[&Sample<T>]) -> Result<(Batch<T>, Tensor<T>)> {
    let batch = if parts.len() == 1 {
        parts[0].batch.clone()
    } else {
        Batch::concat(&parts.iter().map(|s| s.batch.clone()).collect::<Vec<_>>())?
    };
    Ok((batch, stack_targets(parts)?))
}

/// Mean loss and the gradient of every parameter for one merged batch.
pub fn loss_and_grads<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    batch: &Batch<T>,
    target: &Tensor<T>,
) -> Result<(f64, Vec<Vec<T>>)> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let out = model.forward(&mut tape, &p, batch)?;
    let loss = mse_loss(&mut tape, out, target)?;
    let value = tape.value(loss).data()[0].to_f();
    let grads = tape.backward(loss)?;
    let per_param = p.vars().iter().map(|&v| grads.wrt(v).into_data()).collect();
    Ok((value, per_param))
}

/// Mean normalized loss over samples.
pub fn evaluate_loss<T: Scalar>(model: &Model, store: &ParamStore<T>, samples: &[&Sample<T>]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for s in samples {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let out = model.forward(&mut tape, &p, &s.batch)?;
        let loss = mse_loss(&mut tape, out, &s.target)?;
        total += tape.value(loss).data()[0].to_f();
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Parameters were restored from this epoch.
    pub best_epoch: Option<usize>,
    pub seconds: f64,
}

impl History {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn evenly_spaced<T>(items: &[T], count: usize) -> Vec<&T> {
    if count == 0 || count >= items.len() {
        return items.iter().collect();
    }
    (0..count).map(|k| &items[k * items.len() / count]).collect()
}

/// Train `store` in place. On a non-finite loss the parameters from the start of
/// the failing epoch are restored and a divergence error is returned.
pub fn fit<T: Scalar>(
    model: &Model,
    store: &mut ParamStore<T>,
    train: &[Sample<T>],
    valid: &[Sample<T>],
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    let started = Instant::now();
    let mut history = History::default();
    if cfg.epochs == 0 {
        return Ok(history);
    }
    if train.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }
    let valid_set = evenly_spaced(valid, cfg.valid_samples);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate, store);
    let mut plateau = Plateau::new(cfg.decay, cfg.patience);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let per_epoch = if cfg.samples_per_epoch == 0 { train.len() } else { cfg.samples_per_epoch.min(train.len()) };
    let mut best: Option<(f64, ParamStore<T>, usize)> = None;

    for epoch in 1..=cfg.epochs {
        let last_good = store.clone();
        let lr = adam.lr;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order[..per_epoch].chunks(cfg.batch_size) {
            let parts: Vec<&Sample<T>> = chunk.iter().map(|&k| &train[k]).collect();
            let (batch, target) = merge(&parts)?;
            let (loss, grads) = loss_and_grads(model, store, &batch, &target)?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.to_f().is_finite()) {
                *store = last_good;
                return Err(Error::Divergence {
                    epoch,
                    reason: format!("non-finite training loss {loss} after {batches} batches"),
                });
            }
            adam.step(store, &grads);
            total += loss;
            batches += 1;
        }
        let train_loss = total / batches as f64;
        let valid_loss = if valid_set.is_empty() { train_loss } else { evaluate_loss(model, store, &valid_set)? };
        if !valid_loss.is_finite() {
            *store = last_good;
            return Err(Error::Divergence {
                epoch,
                reason: format!("non-finite validation loss {valid_loss}"),
            });
        }
        log::info!("epoch {epoch}: train {train_loss:.6e} valid {valid_loss:.6e} lr {lr:.3e}");
        history.records.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            lr,
        });
        if cfg.keep_best && best.as_ref().is_none_or(|(b, _, _)| valid_loss < *b) {
            best = Some((valid_loss, store.clone(), epoch));
        }
        adam.lr = plateau.observe(valid_loss, adam.lr);
        if cfg.time_budget_secs > 0.0 && started.elapsed().as_secs_f64() >= cfg.time_budget_secs {
            log::info!("time budget reached after epoch {epoch}");
            break;
        }
    }
    if let Some((_, params, epoch)) = best {
        *store = params;
        history.best_epoch = Some(epoch);
    }
    history.seconds = started.elapsed().as_secs_f64();
    Ok(history)
}
