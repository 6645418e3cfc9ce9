//! Binary checkpoint container.
//!
//! ```text
//! magic "FPNETCKP" | version u32 | manifest length u64 | manifest JSON | payload | CRC-32 u32
//! ```
//!
//! Integers are little-endian. The manifest lists every tensor with its
//! byte offset into the payload; payload elements are little-endian IEEE-754.
//! The CRC covers manifest and payload, and is verified before anything is
//! decoded.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_atomic, MetricsRecord, SgdState, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::model_zoo::ModelSpec;
use crate::tensor::{DType, Scalar, Shape, Tensor};

const MAGIC: &[u8; 8] = b"FPNETCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "momentum/";

/// A named tensor: a model parameter or buffer, or a momentum buffer named
/// `momentum/<parameter>`.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub spec: ModelSpec,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub sgd_step: usize,
    pub metrics: Vec<MetricsRecord>,
    pub tensors: Vec<TensorEntry<T>>,
}

#[derive(Serialize, Deserialize)]
struct ManifestTensor {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    offset: usize,
}

/// Batch order and augmentation are functions of these and the epoch.
#[derive(Serialize, Deserialize)]
struct RngState {
    seed: u64,
    next_epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    model: ModelSpec,
    config: TrainConfig,
    epoch: usize,
    sgd_step: usize,
    rng: RngState,
    metrics: Vec<MetricsRecord>,
    tensors: Vec<ManifestTensor>,
}

impl<T: Scalar> Checkpoint<T> {
    pub(super) fn capture(t: &Trainer<T>) -> Self {
        let mut tensors: Vec<TensorEntry<T>> =
            t.store.iter().map(|(_, p)| TensorEntry { name: p.name().to_string(), tensor: p.value().clone() }).collect();
        for ((_, p), v) in t.store.iter().zip(&t.sgd.velocity) {
            if let Some(v) = v {
                tensors.push(TensorEntry { name: format!("{MOMENTUM_PREFIX}{}", p.name()), tensor: v.clone() });
            }
        }
        Checkpoint {
            spec: t.model.spec().clone(),
            config: t.config.clone(),
            epoch: t.epoch,
            sgd_step: t.sgd.step,
            metrics: t.metrics.clone(),
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub(super) fn restore_into(self, t: &mut Trainer<T>) -> Result<()> {
        if &self.spec != t.model.spec() {
            return Err(Error::Format(format!("checkpoint is for {}, not {}", self.spec.label(), t.model.spec().label())));
        }
        let mut velocity: Vec<Option<Tensor<T>>> = vec![None; t.store.len()];
        let mut seen = vec![false; t.store.len()];
        for e in self.tensors {
            let (name, momentum) = match e.name.strip_prefix(MOMENTUM_PREFIX) {
                Some(rest) => (rest, true),
                None => (e.name.as_str(), false),
            };
            let id = t.store.id_of(name).ok_or_else(|| Error::Format(format!("unknown tensor `{}` in checkpoint", e.name)))?;
            let p = t.store.get_mut(id);
            if p.value().shape() != e.tensor.shape() {
                return Err(Error::Format(format!("`{}` has shape {}, model expects {}", e.name, e.tensor.shape(), p.value().shape())));
            }
            if momentum {
                velocity[id.index()] = Some(e.tensor);
            } else {
                *p.value_mut() = e.tensor;
                seen[id.index()] = true;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let name = t.store.iter().nth(i).map(|(_, p)| p.name().to_string()).unwrap_or_default();
            return Err(Error::Format(format!("checkpoint lacks `{name}`")));
        }
        t.sgd = SgdState { velocity, step: self.sgd_step };
        t.epoch = self.epoch;
        t.metrics = self.metrics;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for e in &self.tensors {
            entries.push(ManifestTensor { name: e.name.clone(), shape: e.tensor.dims().to_vec(), dtype: T::DTYPE, offset: payload.len() });
            for &v in e.tensor.data() {
                v.write_le(&mut payload);
            }
        }
        let manifest = Manifest {
            model: self.spec.clone(),
            config: self.config.clone(),
            epoch: self.epoch,
            sgd_step: self.sgd_step,
            rng: RngState { seed: self.config.seed, next_epoch: self.epoch },
            metrics: self.metrics.clone(),
            tensors: entries,
        };
        let manifest = serde_json::to_vec(&manifest).expect("manifest serialises");
        let mut out = Vec::with_capacity(24 + manifest.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload);
        let crc = crc32fast::hash(&out[20..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let (body, tail) = bytes[20..].split_at(bytes.len() - 24);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        if mlen > body.len() {
            return Err(Error::Format("manifest length exceeds file".into()));
        }
        let (manifest, payload) = body.split_at(mlen);
        let m: Manifest = serde_json::from_slice(manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        let width = T::DTYPE.size();
        let mut tensors = Vec::with_capacity(m.tensors.len());
        for t in m.tensors {
            if t.dtype != T::DTYPE {
                return Err(Error::Format(format!("`{}` is {}, expected {}", t.name, t.dtype, T::DTYPE)));
            }
            let shape = Shape::new(t.shape)?;
            let end = t.offset + shape.numel() * width;
            let raw = payload.get(t.offset..end).ok_or_else(|| Error::Format(format!("`{}` lies outside the payload", t.name)))?;
            let data = raw.chunks_exact(width).map(T::read_le).collect();
            tensors.push(TensorEntry { name: t.name, tensor: Tensor::new(shape, data)? });
        }
        Ok(Checkpoint { spec: m.model, config: m.config, epoch: m.epoch, sgd_step: m.sgd_step, metrics: m.metrics, tensors })
    }
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ck: &Checkpoint<T>) -> Result<()> {
    write_atomic(path, &ck.to_bytes())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
