//! Binary checkpoint:
//!
//! ```text
//! b"IRONCKPT" | u32 version | u32 len, UTF-8 JSON {config, metadata}
//! u32 tensor count, then per tensor:
//!   u32 name len | name | u8 dtype (0 = f32, 1 = f64) | u32 rank | rank x u64 dims | LE payload
//! ```
//! All integers are little-endian.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Model, PipelineError, TrainConfig};
use crate::numerics::{DType, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IRONCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not an IRONCKPT file")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("truncated file while reading {0}")]
    Truncated(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainMetadata {
    pub epochs_completed: usize,
    pub steps: usize,
    pub seed: u64,
    pub loss_curve: Vec<f64>,
    pub freespace_frequency: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub metadata: TrainMetadata,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    metadata: TrainMetadata,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new(model: &Model, config: TrainConfig, metadata: TrainMetadata) -> Self {
        let config = TrainConfig { model: model.config.clone(), ..config };
        let tensors = model.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        Checkpoint { format_version: CHECKPOINT_VERSION, config, metadata, tensors }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_string(&Header { config: self.config.clone(), metadata: self.metadata.clone() })
            .expect("header serialises");
        let payload: usize = self.tensors.iter().map(|(n, t)| n.len() + 9 + 8 * t.rank() + 4 * t.len()).sum();
        let mut out = Vec::with_capacity(20 + header.len() + payload);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DType::F32.tag());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(8, "magic").map_err(|_| CheckpointError::BadMagic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: version, expected: CHECKPOINT_VERSION });
        }
        let len = r.u32("config length")? as usize;
        let text = std::str::from_utf8(r.take(len, "config")?)
            .map_err(|e| CheckpointError::Malformed(format!("config is not UTF-8: {e}")))?;
        let header: Header =
            serde_json::from_str(text).map_err(|e| CheckpointError::Malformed(format!("config: {e}")))?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let name_len = r.u32(&format!("name of tensor #{i}"))? as usize;
            let name = std::str::from_utf8(r.take(name_len, &format!("name of tensor #{i}"))?)
                .map_err(|_| CheckpointError::Malformed(format!("tensor #{i} name is not UTF-8")))?
                .to_string();
            let what = format!("tensor `{name}`");
            let tag = r.u8(&what)?;
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| CheckpointError::Malformed(format!("tensor `{name}` has unknown dtype tag {tag}")))?;
            let rank = r.u32(&what)? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64(&what)? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| {
                CheckpointError::Malformed(format!("tensor `{name}` shape {shape:?} overflows"))
            })?;
            let bytes = n
                .checked_mul(dtype.size_of())
                .ok_or_else(|| CheckpointError::Malformed(format!("tensor `{name}` is too large")))?;
            let raw = r.take(bytes, &what)?;
            let data: Vec<f32> = match dtype {
                DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32).collect(),
            };
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { format_version: version, config: header.config, metadata: header.metadata, tensors })
    }

    /// Rebuild the model and load every tensor by name.
    pub fn to_model(&self) -> Result<Model, PipelineError> {
        let mut model = Model::new(self.config.model.clone(), self.config.seed)?;
        if model.params.len() != self.tensors.len() {
            return Err(CheckpointError::Mismatch(format!(
                "{} tensors in file, model has {}",
                self.tensors.len(),
                model.params.len()
            ))
            .into());
        }
        for (name, t) in &self.tensors {
            if model.params.get(name).is_none() {
                return Err(CheckpointError::Mismatch(format!("unknown tensor `{name}`")).into());
            }
            model.params.set(name, t.clone()).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        }
        Ok(model)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| CheckpointError::Io { path: dir.to_path_buf(), source })?;
    }
    std::fs::write(path, ckpt.to_bytes()).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    Checkpoint::from_bytes(&bytes)
}
