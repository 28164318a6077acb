use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::train::Trainable;
use super::{argmax, cross_entropy, softmax};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::trajectory::LocationId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: 64,
        }
    }
}

/// Parameter order used by gradients, Adam state and checkpoints.
pub(crate) const PARAM_NAMES: [&str; 5] = ["embedding", "w_gates", "b_gates", "w_head", "b_head"];

/// Embedding (`M x E`), gate weights over `[x_t ; h_{t-1}]` stacked as input,
/// forget, cell and output blocks (`4H x (E+H)`), and a linear head (`M x H`).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmClassifier {
    pub m: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub embedding: Tensor,
    pub w_gates: Tensor,
    pub b_gates: Tensor,
    pub w_head: Tensor,
    pub b_head: Tensor,
}

/// Activations of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct LstmCache {
    tokens: Vec<LocationId>,
    /// `[x_t ; h_{t-1}]` per step.
    inputs: Vec<f64>,
    /// Activated gates i, f, g, o per step.
    gates: Vec<f64>,
    /// Cell states `c_0 ..= c_T`.
    cells: Vec<f64>,
    tanh_cells: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LstmClassifier {
    pub fn zeros(m: usize, cfg: &LstmConfig) -> Self {
        let (e, h) = (cfg.embed_dim, cfg.hidden_dim);
        Self {
            m,
            embed_dim: e,
            hidden_dim: h,
            embedding: Tensor::zeros(&[m, e]),
            w_gates: Tensor::zeros(&[4 * h, e + h]),
            b_gates: Tensor::zeros(&[4 * h]),
            w_head: Tensor::zeros(&[m, h]),
            b_head: Tensor::zeros(&[m]),
        }
    }

    /// Every parameter drawn from `U(-1/sqrt(H), 1/sqrt(H))`.
    pub fn new(m: usize, cfg: &LstmConfig, seed: u64) -> Result<Self> {
        if m < 1 || cfg.embed_dim < 1 || cfg.hidden_dim < 1 {
            return Err(Error::config("LSTM dimensions must be >= 1"));
        }
        let mut model = Self::zeros(m, cfg);
        let bound = 1.0 / (cfg.hidden_dim as f64).sqrt();
        let mut rng = rng_from_seed(seed);
        for t in model.tensors_mut() {
            for x in t.data.iter_mut() {
                *x = rng.random_range(-bound..bound);
            }
        }
        Ok(model)
    }

    pub fn tensors(&self) -> [&Tensor; 5] {
        [&self.embedding, &self.w_gates, &self.b_gates, &self.w_head, &self.b_head]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.embedding,
            &mut self.w_gates,
            &mut self.b_gates,
            &mut self.w_head,
            &mut self.b_head,
        ]
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        PARAM_NAMES.iter().copied().zip(self.tensors()).collect()
    }

    pub fn check_tokens(&self, tokens: &[LocationId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("token sequence"));
        }
        match tokens.iter().find(|&&t| t as usize >= self.m) {
            Some(&bad) => Err(Error::LocationOutOfRange {
                id: bad,
                m: self.m as u32,
            }),
            None => Ok(()),
        }
    }

    /// Runs the recurrence from zero state and returns logits plus the cache.
    pub fn forward(&self, tokens: &[LocationId]) -> Result<LstmCache> {
        self.check_tokens(tokens)?;
        Ok(self.forward_unchecked(tokens))
    }

    pub(crate) fn forward_unchecked(&self, tokens: &[LocationId]) -> LstmCache {
        let (e, h) = (self.embed_dim, self.hidden_dim);
        let k = e + h;
        let steps = tokens.len();
        let mut cache = LstmCache {
            tokens: tokens.to_vec(),
            inputs: vec![0.0; steps * k],
            gates: vec![0.0; steps * 4 * h],
            cells: vec![0.0; (steps + 1) * h],
            tanh_cells: vec![0.0; steps * h],
            hidden: vec![0.0; h],
            logits: vec![0.0; self.m],
        };
        let mut z = vec![0.0; 4 * h];
        let mut hidden = vec![0.0; h];
        for (t, &tok) in tokens.iter().enumerate() {
            let input = &mut cache.inputs[t * k..(t + 1) * k];
            input[..e].copy_from_slice(&self.embedding.data[tok as usize * e..(tok as usize + 1) * e]);
            input[e..].copy_from_slice(&hidden);
            for (r, zr) in z.iter_mut().enumerate() {
                let row = &self.w_gates.data[r * k..(r + 1) * k];
                *zr = self.b_gates.data[r] + row.iter().zip(input.iter()).map(|(w, x)| w * x).sum::<f64>();
            }
            let gates = &mut cache.gates[t * 4 * h..(t + 1) * 4 * h];
            for j in 0..h {
                gates[j] = sigmoid(z[j]);
                gates[h + j] = sigmoid(z[h + j]);
                gates[2 * h + j] = z[2 * h + j].tanh();
                gates[3 * h + j] = sigmoid(z[3 * h + j]);
            }
            let (prev, next) = cache.cells.split_at_mut((t + 1) * h);
            let c_prev = &prev[t * h..];
            let c = &mut next[..h];
            for j in 0..h {
                c[j] = gates[h + j] * c_prev[j] + gates[j] * gates[2 * h + j];
                let tc = c[j].tanh();
                cache.tanh_cells[t * h + j] = tc;
                hidden[j] = gates[3 * h + j] * tc;
            }
        }
        for (r, out) in cache.logits.iter_mut().enumerate() {
            let row = &self.w_head.data[r * h..(r + 1) * h];
            *out = self.b_head.data[r] + row.iter().zip(&hidden).map(|(w, x)| w * x).sum::<f64>();
        }
        cache.hidden = hidden;
        cache
    }

    /// Accumulates parameter gradients for an upstream gradient on the logits.
    ///
    /// `grads` holds one buffer per parameter tensor, in [`PARAM_NAMES`] order.
    pub fn backward(&self, cache: &LstmCache, dlogits: &[f64], grads: &mut [Vec<f64>]) {
        let (e, h) = (self.embed_dim, self.hidden_dim);
        let k = e + h;
        let [g_emb, g_w, g_b, g_wh, g_bh] = grads else {
            panic!("expected {} gradient buffers", PARAM_NAMES.len());
        };
        let mut dh = vec![0.0; h];
        for (r, &d) in dlogits.iter().enumerate() {
            g_bh[r] += d;
            let row = &self.w_head.data[r * h..(r + 1) * h];
            let grow = &mut g_wh[r * h..(r + 1) * h];
            for j in 0..h {
                grow[j] += d * cache.hidden[j];
                dh[j] += d * row[j];
            }
        }
        let mut dc = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        let mut dinput = vec![0.0; k];
        for t in (0..cache.tokens.len()).rev() {
            let gates = &cache.gates[t * 4 * h..(t + 1) * 4 * h];
            let c_prev = &cache.cells[t * h..(t + 1) * h];
            let tanh_c = &cache.tanh_cells[t * h..(t + 1) * h];
            for j in 0..h {
                let (i, f, g, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                let d_o = dh[j] * tanh_c[j];
                dc[j] += dh[j] * o * (1.0 - tanh_c[j] * tanh_c[j]);
                let d_i = dc[j] * g;
                let d_g = dc[j] * i;
                let d_f = dc[j] * c_prev[j];
                dz[j] = d_i * i * (1.0 - i);
                dz[h + j] = d_f * f * (1.0 - f);
                dz[2 * h + j] = d_g * (1.0 - g * g);
                dz[3 * h + j] = d_o * o * (1.0 - o);
                dc[j] *= f;
            }
            let input = &cache.inputs[t * k..(t + 1) * k];
            dinput.iter_mut().for_each(|x| *x = 0.0);
            for (r, &d) in dz.iter().enumerate() {
                g_b[r] += d;
                let row = &self.w_gates.data[r * k..(r + 1) * k];
                let grow = &mut g_w[r * k..(r + 1) * k];
                for c in 0..k {
                    grow[c] += d * input[c];
                    dinput[c] += d * row[c];
                }
            }
            let tok = cache.tokens[t] as usize;
            for (g, d) in g_emb[tok * e..(tok + 1) * e].iter_mut().zip(&dinput[..e]) {
                *g += d;
            }
            dh.copy_from_slice(&dinput[e..]);
        }
    }

    pub fn logits(&self, tokens: &[LocationId]) -> Result<Vec<f64>> {
        Ok(self.forward(tokens)?.logits)
    }

    /// Arg-max class (smallest ID on ties) together with the raw logits.
    pub fn predict(&self, tokens: &[LocationId]) -> Result<(LocationId, Vec<f64>)> {
        let logits = self.logits(tokens)?;
        Ok((argmax(&logits) as LocationId, logits))
    }

    pub fn probabilities(&self, tokens: &[LocationId]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(tokens)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqExample {
    pub tokens: Vec<LocationId>,
    pub target: LocationId,
}

impl Trainable for LstmClassifier {
    type Example = SeqExample;

    fn params(&self) -> Vec<&[f64]> {
        self.tensors().into_iter().map(|t| t.data.as_slice()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.tensors_mut().into_iter().map(|t| t.data.as_mut_slice()).collect()
    }

    fn check(&self, ex: &SeqExample) -> Result<()> {
        self.check_tokens(&ex.tokens)?;
        if ex.target as usize >= self.m {
            return Err(Error::LocationOutOfRange {
                id: ex.target,
                m: self.m as u32,
            });
        }
        Ok(())
    }

    fn accumulate(&self, ex: &SeqExample, grads: &mut [Vec<f64>]) -> f64 {
        let cache = self.forward_unchecked(&ex.tokens);
        let mut d = softmax(&cache.logits);
        d[ex.target as usize] -= 1.0;
        self.backward(&cache, &d, grads);
        cross_entropy(&cache.logits, ex.target as usize)
    }

    fn predict_class(&self, ex: &SeqExample) -> u32 {
        argmax(&self.forward_unchecked(&ex.tokens).logits) as u32
    }

    fn target(ex: &SeqExample) -> u32 {
        ex.target
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralseq::batch_loss_and_grads;

    fn small(seed: u64) -> LstmClassifier {
        LstmClassifier::new(
            5,
            &LstmConfig {
                embed_dim: 4,
                hidden_dim: 6,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn zero_model_is_uniform() {
        let model = LstmClassifier::zeros(7, &LstmConfig::default());
        let (id, logits) = model.predict(&[1, 2, 3]).unwrap();
        assert!(logits.iter().all(|&l| l == 0.0));
        assert_eq!(id, 0);
        let p = model.probabilities(&[4]).unwrap();
        assert!(p.iter().all(|&x| (x - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn single_step_matches_scalar_computation() {
        let model = small(3);
        let tok = 2usize;
        let (e, h) = (4, 6);
        let x = &model.embedding.data[tok * e..(tok + 1) * e];
        let gate = |block: usize, j: usize| -> f64 {
            let r = block * h + j;
            let mut z = model.b_gates.data[r];
            for c in 0..e {
                z += model.w_gates.data[r * (e + h) + c] * x[c];
            }
            z
        };
        let mut hidden = [0.0; 6];
        for j in 0..h {
            let i = 1.0 / (1.0 + (-gate(0, j)).exp());
            let g = gate(2, j).tanh();
            let o = 1.0 / (1.0 + (-gate(3, j)).exp());
            // forget gate multiplies a zero initial cell
            hidden[j] = o * (i * g).tanh();
        }
        let logits = model.logits(&[tok as u32]).unwrap();
        for r in 0..5 {
            let mut expected = model.b_head.data[r];
            for j in 0..h {
                expected += model.w_head.data[r * h + j] * hidden[j];
            }
            assert!((logits[r] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn order_matters() {
        let model = small(11);
        let a = model.logits(&[0, 1, 2, 3]).unwrap();
        let b = model.logits(&[3, 1, 2, 0]).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn bad_tokens_rejected() {
        let model = small(1);
        assert!(matches!(model.forward(&[5]), Err(Error::LocationOutOfRange { id: 5, m: 5 })));
        assert!(model.forward(&[]).is_err());
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let model = small(2);
        let ex = SeqExample {
            tokens: vec![1, 3, 0],
            target: 4,
        };
        let (l1, g1) = batch_loss_and_grads(&model, std::slice::from_ref(&ex));
        let (l2, g2) = batch_loss_and_grads(&model, &[ex.clone(), ex]);
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.iter().flatten().zip(g2.iter().flatten()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
