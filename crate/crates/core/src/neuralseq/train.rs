use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// A model trained by minibatch gradient descent on a cross-entropy loss.
pub trait Trainable: Clone {
    type Example;

    /// Parameter buffers in a fixed order.
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;
    fn check(&self, _ex: &Self::Example) -> Result<()> {
        Ok(())
    }
    /// Adds the gradient of one example's loss into `grads` and returns the loss.
    fn accumulate(&self, ex: &Self::Example, grads: &mut [Vec<f64>]) -> f64;
    fn predict_class(&self, ex: &Self::Example) -> u32;
    fn target(ex: &Self::Example) -> u32;

    fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }
}

/// Mean loss and mean gradient over a batch.
pub fn batch_loss_and_grads<M: Trainable>(model: &M, batch: &[M::Example]) -> (f64, Vec<Vec<f64>>) {
    let mut grads = model.zero_grads();
    let mut loss = 0.0;
    for ex in batch {
        loss += model.accumulate(ex, &mut grads);
    }
    let scale = 1.0 / batch.len().max(1) as f64;
    grads.iter_mut().flatten().for_each(|g| *g *= scale);
    (loss * scale, grads)
}

pub fn accuracy_on<M: Trainable + Sync>(model: &M, data: &[M::Example]) -> f64
where
    M::Example: Sync,
{
    if data.is_empty() {
        return 0.0;
    }
    let hits = data.par_iter().filter(|ex| model.predict_class(ex) == M::target(ex)).count();
    hits as f64 / data.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub early_stop_patience: usize,
    #[serde(skip)]
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            max_epochs: 50,
            early_stop_patience: 5,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || self.learning_rate.is_infinite() {
            return Err(Error::config("train.learning_rate must be finite and >= 0"));
        }
        if self.early_stop_patience < 1 || self.batch_size < 1 {
            return Err(Error::config("train.batch_size and early_stop_patience must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("adam betas must be in [0,1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, shapes: &[usize]) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: &[Vec<f64>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (k, p) in params.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: Option<usize>,
}

/// Examples per parallel gradient task. Partial sums are added in task order,
/// so results do not depend on the number of threads.
const GRAD_CHUNK: usize = 8;

/// Summed loss and summed gradients over `indices`.
fn summed_grads<M: Trainable + Sync>(model: &M, data: &[M::Example], indices: &[usize]) -> (f64, Vec<Vec<f64>>)
where
    M::Example: Sync,
{
    let parts: Vec<(f64, Vec<Vec<f64>>)> = indices
        .par_chunks(GRAD_CHUNK)
        .map(|sub| {
            let mut g = model.zero_grads();
            let loss = sub.iter().map(|&i| model.accumulate(&data[i], &mut g)).sum::<f64>();
            (loss, g)
        })
        .collect();
    let mut parts = parts.into_iter();
    let (mut loss, mut grads) = parts.next().unwrap_or_else(|| (0.0, model.zero_grads()));
    for (l, g) in parts {
        loss += l;
        for (acc, part) in grads.iter_mut().zip(g) {
            acc.iter_mut().zip(part).for_each(|(a, b)| *a += b);
        }
    }
    (loss, grads)
}

/// Adam training with seeded epoch shuffling and early stopping on
/// validation accuracy. Returns the best-validation checkpoint, or the last
/// epoch when there is no validation data.
pub fn fit<M: Trainable + Sync>(mut model: M, train: &[M::Example], val: &[M::Example], cfg: &TrainConfig) -> Result<(M, TrainHistory)>
where
    M::Example: Sync,
{
    cfg.validate()?;
    for ex in train.iter().chain(val) {
        model.check(ex)?;
    }
    let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut adam = Adam::new(cfg, &shapes);
    let mut rng = rng_from_seed(cfg.rng_seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, M)> = None;
    let mut stale = 0;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (loss, mut grads) = summed_grads(&model, train, chunk);
            total += loss;
            let scale = 1.0 / chunk.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
            adam.update(model.params_mut(), &grads);
        }
        let val_accuracy = accuracy_on(&model, val);
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total / train.len().max(1) as f64,
            val_accuracy,
        });
        if val.is_empty() {
            history.best_epoch = Some(epoch);
            continue;
        }
        if best.as_ref().is_none_or(|(acc, _)| val_accuracy > *acc) {
            best = Some((val_accuracy, model.clone()));
            history.best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
        }
    }
    Ok(match best {
        Some((_, m)) => (m, history),
        None => (model, history),
    })
}
