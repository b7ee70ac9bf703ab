//! Binary checkpoint format.
//!
//! ```text
//! "SRTN" | version: u32 LE | metadata length: u64 LE | metadata (UTF-8 JSON)
//! | parameter blobs: f32 LE, contiguous, in manifest order
//! ```
//!
//! Manifest offsets and sizes are in bytes relative to the first blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{TrainConfig, VariantMode};
use crate::grad::{AdamConfig, Tensor};
use crate::nets::{NetConfig, ParamSet};
use crate::schedule::ScheduleParams;

pub const MAGIC: &[u8; 4] = b"SRTN";
pub const FORMAT_VERSION: u32 = 1;

const ADAM_FIRST: &str = "adam.m/";
const ADAM_SECOND: &str = "adam.v/";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated checkpoint: need {needed} bytes, file has {found}")]
    Truncated { needed: usize, found: usize },
    #[error("manifest disagrees with data: {0}")]
    Manifest(String),
    #[error("bad metadata: {0}")]
    Metadata(String),
    #[error("{0}: {1}")]
    Io(String, String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    mode: VariantMode,
    step: u64,
    det_config: NetConfig,
    sto_config: NetConfig,
    schedule: ScheduleParams,
    train: TrainConfig,
    adam: Option<AdamMeta>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamMeta {
    config: AdamConfig,
    step: u64,
}

/// Optimizer moments, in the order of the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSnapshot {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub mode: VariantMode,
    pub step: u64,
    pub det_config: NetConfig,
    pub sto_config: NetConfig,
    pub schedule: ScheduleParams,
    pub train: TrainConfig,
    /// `det.*` tensors followed by `sto.*` tensors.
    pub params: ParamSet<f32>,
    pub adam: Option<AdamSnapshot>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut blobs: Vec<&[f32]> = Vec::new();
        let mut offset = 0u64;
        let mut push = |name: String, shape: &[usize], data: &'_ [f32]| {
            let size = (data.len() * 4) as u64;
            entries.push(TensorEntry {
                name,
                shape: shape.to_vec(),
                offset,
                size,
            });
            offset += size;
        };
        for (name, t) in self.params.iter() {
            push(name.to_string(), t.shape(), t.data());
            blobs.push(t.data());
        }
        if let Some(adam) = &self.adam {
            for ((name, t), m) in self.params.iter().zip(&adam.first) {
                push(format!("{ADAM_FIRST}{name}"), t.shape(), m);
                blobs.push(m);
            }
            for ((name, t), v) in self.params.iter().zip(&adam.second) {
                push(format!("{ADAM_SECOND}{name}"), t.shape(), v);
                blobs.push(v);
            }
        }

        let meta = Metadata {
            mode: self.mode,
            step: self.step,
            det_config: self.det_config.clone(),
            sto_config: self.sto_config.clone(),
            schedule: self.schedule,
            train: self.train.clone(),
            adam: self.adam.as_ref().map(|a| AdamMeta {
                config: a.config,
                step: a.step,
            }),
            tensors: entries,
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");

        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for blob in blobs {
            for v in blob {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated {
                needed: 16,
                found: bytes.len(),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let blob_start = 16usize
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or(CheckpointError::Truncated {
                needed: 16usize.saturating_add(meta_len),
                found: bytes.len(),
            })?;
        let meta: Metadata = serde_json::from_slice(&bytes[16..blob_start])
            .map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        let blob = &bytes[blob_start..];

        let mut expected_offset = 0u64;
        for e in &meta.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected_offset {
                return Err(CheckpointError::Manifest(format!(
                    "{} starts at {} but previous tensor ends at {}",
                    e.name, e.offset, expected_offset
                )));
            }
            if e.size != (n * 4) as u64 || e.shape.contains(&0) {
                return Err(CheckpointError::Manifest(format!(
                    "{} has shape {:?} but size {} bytes",
                    e.name, e.shape, e.size
                )));
            }
            expected_offset += e.size;
        }
        let needed = blob_start + expected_offset as usize;
        if (blob.len() as u64) < expected_offset {
            return Err(CheckpointError::Truncated {
                needed,
                found: bytes.len(),
            });
        }
        if (blob.len() as u64) > expected_offset {
            return Err(CheckpointError::Manifest(format!(
                "{} trailing bytes after the last tensor",
                blob.len() as u64 - expected_offset
            )));
        }

        let read = |e: &TensorEntry| -> Vec<f32> {
            blob[e.offset as usize..(e.offset + e.size) as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        };

        let mut params = ParamSet::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for e in &meta.tensors {
            let data = read(e);
            if e.name.starts_with(ADAM_FIRST) {
                first.push(data);
            } else if e.name.starts_with(ADAM_SECOND) {
                second.push(data);
            } else {
                let t = Tensor::new(e.shape.clone(), data)
                    .map_err(|err| CheckpointError::Manifest(err.to_string()))?
                    .with_grad();
                params.push(e.name.clone(), t);
            }
        }

        let adam = match meta.adam {
            Some(a) => {
                if first.len() != params.len() || second.len() != params.len() {
                    return Err(CheckpointError::Manifest(
                        "optimizer moments do not match the parameter list".into(),
                    ));
                }
                Some(AdamSnapshot {
                    config: a.config,
                    step: a.step,
                    first,
                    second,
                })
            }
            None if first.is_empty() && second.is_empty() => None,
            None => {
                return Err(CheckpointError::Manifest(
                    "optimizer moments present without optimizer metadata".into(),
                ))
            }
        };

        Ok(Self {
            mode: meta.mode,
            step: meta.step,
            det_config: meta.det_config,
            sto_config: meta.sto_config,
            schedule: meta.schedule,
            train: meta.train,
            params,
            adam,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let io = |e: std::io::Error| CheckpointError::Io(path.display().to_string(), e.to_string());
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, self.to_bytes()).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = fs::read(path)
            .map_err(|e| CheckpointError::Io(path.display().to_string(), e.to_string()))?;
        Self::from_bytes(&bytes)
    }

    /// Manifest entries as stored in the file.
    pub fn manifest(bytes: &[u8]) -> Result<Vec<TensorEntry>, CheckpointError> {
        Self::from_bytes(bytes)?;
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let meta: Metadata = serde_json::from_slice(&bytes[16..16 + meta_len])
            .map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        Ok(meta.tensors)
    }
}
