//! Extractor checkpoints and the embedding cache.
//!
//! Checkpoint layout: `FSCK`, u32 version, u64 header length, a JSON header
//! (architecture, provenance, tensor names and shapes), then every tensor as
//! little-endian f32 in header order.
//!
//! Embedding cache layout: `FSEB`, u32 version, u64 rows, u32 dim, then
//! `rows × dim` little-endian f32 features (row-major) followed by `rows`
//! little-endian u32 class ids.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbones::{build_backbone, BackboneConfig, FeatureExtractor};
use crate::data::{Normalization, ResolutionMode};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::nn::ParamSet;
use crate::tensor::Tensor;

const CKPT_MAGIC: &[u8; 4] = b"FSCK";
const CKPT_VERSION: u32 = 1;
const EMB_MAGIC: &[u8; 4] = b"FSEB";
const EMB_VERSION: u32 = 1;
pub const EMBEDDING_HEADER_BYTES: usize = 20;

/// What produced a checkpoint and how its inputs were prepared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Training method, e.g. `cls+rot` or `anil`.
    pub tasks: String,
    pub epoch: usize,
    pub val_loss: f64,
    pub norm: Normalization,
    pub mode: ResolutionMode,
    pub view_size: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    buffer: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: BackboneConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

/// `<arch>_<tasks>_e<epoch>_vl<val_loss>.ckpt`.
pub fn checkpoint_filename(config: &BackboneConfig, meta: &CheckpointMeta) -> String {
    format!("{}_{}_e{:03}_vl{:.4}.ckpt", config.arch, meta.tasks, meta.epoch, meta.val_loss)
}

pub fn save_checkpoint(path: &Path, fe: &FeatureExtractor<f32>, meta: &CheckpointMeta) -> Result<()> {
    let entries = |set: &ParamSet<f32>, buffer: bool| -> Vec<TensorEntry> {
        set.iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                buffer,
            })
            .collect()
    };
    let mut tensors = entries(fe.params(), false);
    tensors.extend(entries(fe.buffers(), true));
    let header = serde_json::to_vec(&Header {
        config: fe.config().clone(),
        meta: meta.clone(),
        tensors,
    })
    .map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::with_capacity(16 + header.len() + 4 * (fe.params().numel() + fe.buffers().numel()));
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for set in [fe.params(), fe.buffers()] {
        for (_, t) in set.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    write_atomic(path, &out)
}

fn take<'a>(path: &Path, bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::format(path, "truncated file"))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

fn read_f32s(path: &Path, bytes: &[u8], at: &mut usize, n: usize) -> Result<Vec<f32>> {
    let raw = take(path, bytes, at, 4 * n)?;
    Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
}

pub fn load_checkpoint(path: &Path) -> Result<(FeatureExtractor<f32>, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    let mut at = 0;
    if take(path, &bytes, &mut at, 4)? != CKPT_MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(take(path, &bytes, &mut at, 4)?.try_into().expect("4 bytes"));
    if version != CKPT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(take(path, &bytes, &mut at, 8)?.try_into().expect("8 bytes")) as usize;
    let header: Header =
        serde_json::from_slice(take(path, &bytes, &mut at, len)?).map_err(|e| Error::format(path, e.to_string()))?;
    let mut params = ParamSet::new();
    let mut buffers = ParamSet::new();
    for e in &header.tensors {
        let n = e.shape.iter().product();
        let t = Tensor::from_vec(&e.shape, read_f32s(path, &bytes, &mut at, n)?)?;
        if e.buffer {
            buffers.push(e.name.clone(), t);
        } else {
            params.push(e.name.clone(), t);
        }
    }
    if at != bytes.len() {
        return Err(Error::format(path, "trailing bytes after tensors"));
    }
    let mut fe = build_backbone::<f32>(&header.config, 0)?;
    fe.load_state(params, buffers)?;
    Ok((fe, header.meta))
}

/// Feature rows with their dataset class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub features: Tensor<f32>,
    pub class_ids: Vec<u32>,
}

impl EmbeddingTable {
    pub fn encode(&self) -> Vec<u8> {
        let (rows, dim) = (self.features.dim(0), self.features.dim(1));
        let mut out = Vec::with_capacity(EMBEDDING_HEADER_BYTES + rows * (4 * dim + 4));
        out.extend_from_slice(EMB_MAGIC);
        out.extend_from_slice(&EMB_VERSION.to_le_bytes());
        out.extend_from_slice(&(rows as u64).to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        for v in self.features.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in &self.class_ids {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut at = 0;
        if take(path, bytes, &mut at, 4)? != EMB_MAGIC {
            return Err(Error::format(path, "not an embedding cache"));
        }
        let version = u32::from_le_bytes(take(path, bytes, &mut at, 4)?.try_into().expect("4 bytes"));
        if version != EMB_VERSION {
            return Err(Error::format(path, format!("unsupported cache version {version}")));
        }
        let rows = u64::from_le_bytes(take(path, bytes, &mut at, 8)?.try_into().expect("8 bytes")) as usize;
        let dim = u32::from_le_bytes(take(path, bytes, &mut at, 4)?.try_into().expect("4 bytes")) as usize;
        let n = rows.checked_mul(dim).ok_or_else(|| Error::format(path, "header overflow"))?;
        let feats = read_f32s(path, bytes, &mut at, n)?;
        let ids = take(path, bytes, &mut at, 4 * rows)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if at != bytes.len() {
            return Err(Error::format(path, "trailing bytes after class ids"));
        }
        Ok(Self {
            features: Tensor::from_vec(&[rows, dim], feats)?,
            class_ids: ids,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(path, &fs::read(path)?)
    }
}
