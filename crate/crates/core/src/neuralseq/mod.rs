//! Embedding + single-layer LSTM + linear head next-location classifier,
//! trained with hand-written backpropagation through time and Adam.

mod checkpoint;
mod lstm;
mod train;

use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader, TensorMeta};
pub use lstm::{LstmCache, LstmClassifier, LstmConfig, SeqExample, Tensor};
pub use train::{accuracy_on, batch_loss_and_grads, fit, Adam, EpochRecord, TrainConfig, TrainHistory, Trainable};

use crate::error::{Error, Result};
use crate::trajectory::{dedup_consecutive, LocationId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequencePreprocessConfig {
    /// Number of most recent (deduplicated) locations kept.
    pub truncate_len: usize,
}

impl Default for SequencePreprocessConfig {
    fn default() -> Self {
        Self { truncate_len: 100 }
    }
}

/// Merges repeated consecutive locations, then keeps the last `truncate_len`.
pub fn preprocess_sequence(history: &[LocationId], cfg: &SequencePreprocessConfig) -> Result<Vec<LocationId>> {
    if history.is_empty() {
        return Err(Error::EmptyInput("history"));
    }
    if cfg.truncate_len == 0 {
        return Err(Error::config("truncate_len must be >= 1"));
    }
    let unique = dedup_consecutive(history);
    let start = unique.len().saturating_sub(cfg.truncate_len);
    Ok(unique[start..].to_vec())
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(logits)[target]`, computed via log-sum-exp.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Index of the largest value; the smallest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
