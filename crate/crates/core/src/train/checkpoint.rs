//! Binary checkpoint container.
//!
//! Layout: `b"SLYT"`, `u32` version, `u64` header length, JSON header,
//! little-endian `f32` tensor blobs, trailing CRC32 of everything before it.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use slyt_tensor::{AdamConfig, AdamState, Tensor};

use super::{EpochLog, Progress, TrainConfig};
use crate::error::{Error, Result};
use crate::layout::CategoryVocab;
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"SLYT";
pub const VERSION: u32 = 1;
/// Number of trailing log entries kept in a checkpoint.
pub const LOG_TAIL: usize = 100;

const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub state: AdamState<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub categories: CategoryVocab,
    pub optimizer: Option<OptimizerState>,
    pub progress: Option<Progress>,
    pub train_config: Option<TrainConfig>,
    pub log: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the blob section.
    offset: u64,
    /// Element count.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    categories: CategoryVocab,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerMeta>,
    progress: Option<Progress>,
    train_config: Option<TrainConfig>,
    log: Vec<EpochLog>,
}

impl Checkpoint {
    pub fn new(model: Model<f32>, categories: CategoryVocab) -> Self {
        Self {
            model,
            categories,
            optimizer: None,
            progress: None,
            train_config: None,
            log: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut named: Vec<(String, &Tensor<f32>)> = self
            .model
            .names()
            .iter()
            .cloned()
            .zip(self.model.params())
            .collect();
        if let Some(opt) = &self.optimizer {
            for (name, m) in self.model.names().iter().zip(&opt.state.m) {
                named.push((format!("adam.m.{name}"), m));
            }
            for (name, v) in self.model.names().iter().zip(&opt.state.v) {
                named.push((format!("adam.v.{name}"), v));
            }
        }
        let mut tensors = Vec::with_capacity(named.len());
        let mut offset = 0u64;
        for (name, t) in &named {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.numel() as u64,
            });
            offset += 4 * t.numel() as u64;
        }
        let tail = self.log.len().saturating_sub(LOG_TAIL);
        let header = Header {
            config: self.model.config.clone(),
            categories: self.categories.clone(),
            tensors,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerMeta {
                lr: o.config.lr,
                beta1: o.config.beta1,
                beta2: o.config.beta2,
                eps: o.config.eps,
                t: o.state.t,
            }),
            progress: self.progress.clone(),
            train_config: self.train_config.clone(),
            log: self.log[tail..].to_vec(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset as usize + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &named {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE + 4 {
            return Err(Error::Checksum(format!("file too short ({} bytes)", bytes.len())));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checksum("CRC32 mismatch".into()));
        }
        if &body[..4] != MAGIC {
            return Err(Error::Checksum("missing SLYT magic".into()));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::IncompatibleCheckpoint {
                found: version,
                expected: VERSION,
            });
        }
        let header_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
        let blobs_start = PREAMBLE
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Checksum("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&body[PREAMBLE..blobs_start])?;
        let blobs = &body[blobs_start..];
        let read = |entry: &TensorEntry| -> Result<Tensor<f32>> {
            let start = entry.offset as usize;
            let end = start + 4 * entry.len as usize;
            let raw = blobs
                .get(start..end)
                .ok_or_else(|| Error::Checksum(format!("tensor {} lies outside the file", entry.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Ok(Tensor::new(entry.shape.clone(), data)?)
        };
        let find = |name: &str| -> Result<Tensor<f32>> {
            let entry = header
                .tensors
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Checksum(format!("tensor {name} missing")))?;
            read(entry)
        };
        let names: Vec<String> = header.config.param_shapes().into_iter().map(|(n, _)| n).collect();
        let named = names
            .iter()
            .map(|n| Ok((n.clone(), find(n)?)))
            .collect::<Result<Vec<_>>>()?;
        let model = Model::from_params(header.config, named)?;
        let optimizer = match header.optimizer {
            Some(meta) => {
                let m = names.iter().map(|n| find(&format!("adam.m.{n}"))).collect::<Result<_>>()?;
                let v = names.iter().map(|n| find(&format!("adam.v.{n}"))).collect::<Result<_>>()?;
                Some(OptimizerState {
                    config: AdamConfig {
                        lr: meta.lr,
                        beta1: meta.beta1,
                        beta2: meta.beta2,
                        eps: meta.eps,
                    },
                    state: AdamState { m, v, t: meta.t },
                })
            }
            None => None,
        };
        Ok(Self {
            model,
            categories: header.categories,
            optimizer,
            progress: header.progress,
            train_config: header.train_config,
            log: header.log,
        })
    }

    /// Writes atomically: a temporary file in the target directory is
    /// renamed over `path` once complete.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Replaces `path` with `bytes` via a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
