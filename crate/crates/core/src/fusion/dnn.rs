use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralseq::{argmax, cross_entropy, softmax, Checkpoint, CheckpointHeader, LstmCache, LstmClassifier, Tensor, TensorMeta, Trainable};
use crate::rng::rng_from_seed;
use crate::trajectory::LocationId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DnnConfig {
    /// Hidden layer widths; every hidden layer uses a rectifier.
    pub hidden: Vec<usize>,
}

impl Default for DnnConfig {
    fn default() -> Self {
        Self { hidden: vec![128, 64] }
    }
}

impl DnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::config("dnn.hidden widths must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out x in`.
    pub w: Tensor,
    pub b: Tensor,
}

/// Feed-forward classifier: ReLU hidden layers and a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Layer activations; `acts[0]` is the input and the last entry the logits.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn logits(&self) -> &[f64] {
        self.acts.last().expect("non-empty cache")
    }
}

impl Mlp {
    /// He-uniform weights, zero biases.
    pub fn new(n_in: usize, hidden: &[usize], n_out: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut widths = vec![n_in];
        widths.extend_from_slice(hidden);
        widths.push(n_out);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                let mut weights = Tensor::zeros(&[fan_out, fan_in]);
                weights.data.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
                Dense {
                    w: weights,
                    b: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn n_inputs(&self) -> usize {
        self.layers[0].w.shape[1]
    }

    pub fn n_outputs(&self) -> usize {
        self.layers.last().unwrap().w.shape[0]
    }

    pub fn forward(&self, x: &[f64]) -> MlpCache {
        let mut acts = vec![x.to_vec()];
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let n_in = layer.w.shape[1];
            let input = &acts[l];
            let out: Vec<f64> = layer
                .w
                .data
                .chunks(n_in)
                .zip(&layer.b.data)
                .map(|(row, b)| {
                    let z = b + row.iter().zip(input).map(|(w, v)| w * v).sum::<f64>();
                    if l < last {
                        z.max(0.0)
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(out);
        }
        MlpCache { acts }
    }

    /// Accumulates gradients (`[w0, b0, w1, b1, ..]`) and returns the
    /// gradient with respect to the input.
    pub fn backward(&self, cache: &MlpCache, dout: &[f64], grads: &mut [Vec<f64>]) -> Vec<f64> {
        let mut delta = dout.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let n_in = layer.w.shape[1];
            let input = &cache.acts[l];
            let mut dinput = vec![0.0; n_in];
            let (gw, gb) = {
                let (a, b) = grads.split_at_mut(2 * l + 1);
                (&mut a[2 * l], &mut b[0])
            };
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[r] += d;
                let row = &layer.w.data[r * n_in..(r + 1) * n_in];
                let grow = &mut gw[r * n_in..(r + 1) * n_in];
                for c in 0..n_in {
                    grow[c] += d * input[c];
                    dinput[c] += d * row[c];
                }
            }
            if l > 0 {
                // through the ReLU of the previous layer
                for (g, &a) in dinput.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            delta = dinput;
        }
        delta
    }

    pub fn to_checkpoint(&self, seed: u64, extra: serde_json::Value) -> Checkpoint {
        let mut metas = Vec::new();
        let mut tensors = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (suffix, t) in [("w", &layer.w), ("b", &layer.b)] {
                metas.push(TensorMeta {
                    name: format!("layer{l}.{suffix}"),
                    shape: t.shape.clone(),
                });
                tensors.push(t.clone());
            }
        }
        Checkpoint {
            header: CheckpointHeader {
                model: "mlp".into(),
                config: extra,
                seed,
                tensors: metas,
            },
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.tensors.is_empty() || ckpt.tensors.len() % 2 != 0 {
            return Err(Error::parse("mlp checkpoint", "expected weight/bias tensor pairs"));
        }
        let layers = ckpt
            .tensors
            .chunks(2)
            .map(|p| Dense {
                w: p[0].clone(),
                b: p[1].clone(),
            })
            .collect();
        Ok(Self { layers })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnnExample {
    pub x: Vec<f64>,
    pub target: LocationId,
}

impl Trainable for Mlp {
    type Example = DnnExample;

    fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.data.as_slice(), l.b.data.as_slice()])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.w.data.as_mut_slice(), l.b.data.as_mut_slice()])
            .collect()
    }

    fn check(&self, ex: &DnnExample) -> Result<()> {
        if ex.x.len() != self.n_inputs() {
            return Err(Error::DimensionMismatch {
                group: "dnn input".into(),
                expected: self.n_inputs(),
                actual: ex.x.len(),
            });
        }
        if ex.target as usize >= self.n_outputs() {
            return Err(Error::LocationOutOfRange {
                id: ex.target,
                m: self.n_outputs() as u32,
            });
        }
        Ok(())
    }

    fn accumulate(&self, ex: &DnnExample, grads: &mut [Vec<f64>]) -> f64 {
        let cache = self.forward(&ex.x);
        let mut d = softmax(cache.logits());
        d[ex.target as usize] -= 1.0;
        self.backward(&cache, &d, grads);
        cross_entropy(cache.logits(), ex.target as usize)
    }

    fn predict_class(&self, ex: &DnnExample) -> u32 {
        argmax(self.forward(&ex.x).logits()) as u32
    }

    fn target(ex: &DnnExample) -> u32 {
        ex.target
    }
}

/// Per-column z-scoring fitted on training rows; constant columns pass through centred.
/// Scores are clipped so a rarely-set indicator column cannot swamp the rest.
const Z_CLIP: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, n_cols: usize) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; n_cols];
        let mut sq = vec![0.0; n_cols];
        for row in rows {
            n += 1;
            for (j, &v) in row.iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let sd = (s / n - m * m).max(0.0).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| ((v - m) / s).clamp(-Z_CLIP, Z_CLIP))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointExample {
    pub tokens: Vec<LocationId>,
    /// Already encoded and standardized feature columns.
    pub features: Vec<f64>,
    pub target: LocationId,
}

/// LSTM encoder whose logits, concatenated with feature columns, feed an MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    pub lstm: LstmClassifier,
    pub mlp: Mlp,
    /// When false the encoder is frozen and only the MLP learns.
    pub train_encoder: bool,
}

impl JointModel {
    fn forward(&self, ex: &JointExample) -> (LstmCache, MlpCache) {
        let enc = self.lstm.forward_unchecked(&ex.tokens);
        let mut x = enc.logits.clone();
        x.extend_from_slice(&ex.features);
        let head = self.mlp.forward(&x);
        (enc, head)
    }

    pub fn logits(&self, ex: &JointExample) -> Vec<f64> {
        self.forward(ex).1.logits().to_vec()
    }
}

impl Trainable for JointModel {
    type Example = JointExample;

    fn params(&self) -> Vec<&[f64]> {
        let mut p = self.lstm.params();
        p.extend(self.mlp.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.lstm.params_mut();
        p.extend(self.mlp.params_mut());
        p
    }

    fn check(&self, ex: &JointExample) -> Result<()> {
        self.lstm.check_tokens(&ex.tokens)?;
        self.mlp.check(&DnnExample {
            x: vec![0.0; self.lstm.m + ex.features.len()],
            target: ex.target,
        })
    }

    fn accumulate(&self, ex: &JointExample, grads: &mut [Vec<f64>]) -> f64 {
        let (enc, head) = self.forward(ex);
        let mut d = softmax(head.logits());
        d[ex.target as usize] -= 1.0;
        let (g_lstm, g_mlp) = grads.split_at_mut(5);
        let dx = self.mlp.backward(&head, &d, g_mlp);
        if self.train_encoder {
            self.lstm.backward(&enc, &dx[..self.lstm.m], g_lstm);
        }
        cross_entropy(head.logits(), ex.target as usize)
    }

    fn predict_class(&self, ex: &JointExample) -> u32 {
        argmax(&self.logits(ex)) as u32
    }

    fn target(ex: &JointExample) -> u32 {
        ex.target
    }
}
