//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `EGACKPT\0`, a little-endian `u64` header
//! length, a JSON header, then every tensor as little-endian `f32` in header
//! order. Files are written to a temporary sibling and renamed into place.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::NdArray;
use crate::error::{CheckpointError, Error, Result};
use crate::model::{ModelConfig, TransformerModel};
use crate::scalar::Scalar;
use crate::trainer::optim::AdamW;
use crate::trainer::schedule::TrainConfig;

pub const MAGIC: &[u8; 8] = b"EGACKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: usize,
}

impl TensorEntry {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Where a run stood when the checkpoint was taken.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub step: usize,
    pub ema_loss: Option<f64>,
    pub last_val: Option<f64>,
    pub best_val: Option<f64>,
    pub admissibility_clamps: usize,
    pub adam_t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub progress: Option<Progress>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// Tensor values in header order.
    pub values: Vec<Vec<f32>>,
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

impl Checkpoint {
    pub fn new<T: Scalar>(
        model: &TransformerModel<T>,
        optimizer: Option<&AdamW<T>>,
        train: Option<TrainConfig>,
        progress: Option<Progress>,
    ) -> Self {
        let mut tensors = Vec::new();
        let mut values = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, a: &NdArray<T>| {
            tensors.push(TensorEntry {
                name,
                shape: a.shape().to_vec(),
                offset,
            });
            offset += 4 * a.len();
            values.push(a.data().iter().map(|x| x.as_f64() as f32).collect());
        };
        for p in model.params.iter() {
            push(p.name.clone(), &p.value);
        }
        if let Some(opt) = optimizer {
            for (p, m) in model.params.iter().zip(&opt.m) {
                push(format!("{ADAM_M}{}", p.name), m);
            }
            for (p, v) in model.params.iter().zip(&opt.v) {
                push(format!("{ADAM_V}{}", p.name), v);
            }
        }
        Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                model: model.config.clone(),
                train,
                progress,
                tensors,
            },
            values,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        let payload: usize = self.values.iter().map(|v| 4 * v.len()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.values {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::Header("missing checkpoint magic".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or(CheckpointError::Truncated {
                needed: 16usize.saturating_add(header_len),
                available: bytes.len(),
            })?;
        let raw: serde_json::Value = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let found = raw
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| CheckpointError::Header("no format_version".into()))?;
        if found != FORMAT_VERSION as u64 {
            return Err(CheckpointError::Version {
                found: found as u32,
                expected: FORMAT_VERSION,
            });
        }
        let header: CheckpointHeader =
            serde_json::from_value(raw).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let payload = &bytes[header_end..];
        let needed = header.tensors.iter().map(|t| t.offset + 4 * t.len()).max().unwrap_or(0);
        if payload.len() < needed {
            return Err(CheckpointError::Truncated {
                needed,
                available: payload.len(),
            });
        }
        let values = header
            .tensors
            .iter()
            .map(|t| {
                payload[t.offset..t.offset + 4 * t.len()]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect()
            })
            .collect();
        Ok(Self { header, values })
    }

    /// Atomic write: temporary sibling, then rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }

    fn find(&self, name: &str) -> Option<usize> {
        self.header.tensors.iter().position(|t| t.name == name)
    }

    fn array<T: Scalar>(&self, name: &str, expected: &[usize]) -> Result<NdArray<T>> {
        let i = self.find(name).ok_or_else(|| CheckpointError::MissingParam(name.to_string()))?;
        let entry = &self.header.tensors[i];
        if entry.shape != expected {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                found: entry.shape.clone(),
                expected: expected.to_vec(),
            }
            .into());
        }
        NdArray::new(&entry.shape, self.values[i].iter().map(|&x| T::lit(x as f64)).collect())
    }

    /// Overwrites every parameter of `model` from the checkpoint.
    pub fn restore_into<T: Scalar>(&self, model: &mut TransformerModel<T>) -> Result<()> {
        let loaded = model
            .params
            .iter()
            .map(|p| self.array::<T>(&p.name, p.value.shape()))
            .collect::<Result<Vec<_>>>()?;
        for (p, v) in model.params.iter_mut().zip(loaded) {
            p.value = v;
        }
        Ok(())
    }

    /// A model built from the stored configuration with the stored weights.
    pub fn model<T: Scalar>(&self) -> Result<TransformerModel<T>> {
        let mut m = TransformerModel::build(self.header.model.clone())?;
        self.restore_into(&mut m)?;
        Ok(m)
    }

    /// Optimiser moments, when the checkpoint carries them.
    pub fn optimizer<T: Scalar>(&self, model: &TransformerModel<T>) -> Result<Option<AdamW<T>>> {
        let (Some(train), Some(progress)) = (&self.header.train, &self.header.progress) else {
            return Ok(None);
        };
        if self.find(&format!("{ADAM_M}{}", model.params.iter().next().map_or("", |p| &p.name))).is_none() {
            return Ok(None);
        }
        let mut opt = AdamW::new(&model.params, train.beta1, train.beta2, train.eps, train.weight_decay);
        opt.t = progress.adam_t;
        for (i, p) in model.params.iter().enumerate() {
            opt.m[i] = self.array(&format!("{ADAM_M}{}", p.name), p.value.shape())?;
            opt.v[i] = self.array(&format!("{ADAM_V}{}", p.name), p.value.shape())?;
        }
        Ok(Some(opt))
    }
}
