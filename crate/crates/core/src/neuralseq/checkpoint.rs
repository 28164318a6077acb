//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `MOBCKPT1`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then every tensor's values as little-endian `f64` in
//! header order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::lstm::{LstmClassifier, LstmConfig, Tensor, PARAM_NAMES};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MOBCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub tensors: Vec<TensorMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.header
            .tensors
            .iter()
            .position(|t| t.name == name)
            .map(|i| &self.tensors[i])
    }
}

pub fn write_checkpoint<W: Write>(mut out: W, ckpt: &Checkpoint) -> Result<()> {
    let header = serde_json::to_vec(&ckpt.header)?;
    out.write_all(MAGIC)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for t in &ckpt.tensors {
        for v in &t.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::parse("checkpoint", "bad magic"));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut header)?;
    let header: CheckpointHeader = serde_json::from_slice(&header)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut buf = [0u8; 8];
    for meta in &header.tensors {
        let mut t = Tensor::zeros(&meta.shape);
        for v in t.data.iter_mut() {
            input.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        tensors.push(t);
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::parse("checkpoint", format!("{} trailing bytes", rest.len())));
    }
    Ok(Checkpoint { header, tensors })
}

impl LstmClassifier {
    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let named = self.named_tensors();
        Checkpoint {
            header: CheckpointHeader {
                model: "lstm".into(),
                config: serde_json::json!({
                    "m": self.m,
                    "embed_dim": self.embed_dim,
                    "hidden_dim": self.hidden_dim,
                }),
                seed,
                tensors: named
                    .iter()
                    .map(|(n, t)| TensorMeta {
                        name: n.to_string(),
                        shape: t.shape.clone(),
                    })
                    .collect(),
            },
            tensors: named.into_iter().map(|(_, t)| t.clone()).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let field = |k: &str| -> Result<usize> {
            ckpt.header.config[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::parse("checkpoint config", k))
        };
        let cfg = LstmConfig {
            embed_dim: field("embed_dim")?,
            hidden_dim: field("hidden_dim")?,
        };
        let mut model = LstmClassifier::zeros(field("m")?, &cfg);
        for (name, slot) in PARAM_NAMES.iter().zip(model.tensors_mut()) {
            let t = ckpt
                .tensor(name)
                .ok_or_else(|| Error::parse("checkpoint", format!("missing tensor {name}")))?;
            if t.shape != slot.shape {
                return Err(Error::DimensionMismatch {
                    group: name.to_string(),
                    expected: slot.len(),
                    actual: t.len(),
                });
            }
            *slot = t.clone();
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lstm_checkpoint_round_trip() {
        let model = LstmClassifier::new(
            6,
            &LstmConfig {
                embed_dim: 3,
                hidden_dim: 4,
            },
            17,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model.to_checkpoint(17)).unwrap();
        let ckpt = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(ckpt.header.seed, 17);
        assert_eq!(LstmClassifier::from_checkpoint(&ckpt).unwrap(), model);

        buf[0] = b'X';
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
