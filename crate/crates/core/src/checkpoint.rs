//! Named-tensor checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "DRTLCKPT"
//! version u32      1
//! marker  u32      0x01020304 (detects byte-order mixups)
//! count   u32
//! per tensor:
//!   name_len u32, name UTF-8
//!   dtype    u8 (0 = f32)
//!   ndim     u32, dims u64 x ndim
//!   payload  f32 x prod(dims)
//! ```
//!
//! A JSON sidecar `<file>.meta.json` carries architecture and provenance.

use std::fs;
use std::path::{Path, PathBuf};

use drtl_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneConfig, RestorationModel};
use crate::error::{io_err, DrtlError, Result};
use crate::fsio::{read_json, write_atomic, write_json};
use crate::relation::{Drn, DrnConfig};

const MAGIC: &[u8; 8] = b"DRTLCKPT";
const VERSION: u32 = 1;
const MARKER: u32 = 0x0102_0304;
const DTYPE_F32: u8 = 0;

pub fn encode(tensors: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&MARKER.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(DrtlError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(DrtlError::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(DrtlError::Checkpoint(format!("unsupported version {version}")));
    }
    if r.u32()? != MARKER {
        return Err(DrtlError::Checkpoint("byte-order marker mismatch".into()));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| DrtlError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(DrtlError::Checkpoint(format!("{name}: unsupported dtype tag {dtype}")));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::from_vec(&shape, data).expect("sized by shape")));
    }
    if r.pos != bytes.len() {
        return Err(DrtlError::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    write_atomic(path, &encode(tensors))
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes).map_err(|e| DrtlError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneMeta {
    pub backbone: BackboneConfig,
    pub regime: String,
    pub config_hash: String,
    pub seed: u64,
}

pub fn save_backbone(path: &Path, model: &RestorationModel<f32>, meta: &BackboneMeta) -> Result<()> {
    save_tensors(path, &model.named_params())?;
    write_json(&meta_path(path), meta)
}

pub fn load_backbone(path: &Path) -> Result<(RestorationModel<f32>, BackboneMeta)> {
    let meta: BackboneMeta = read_json(&meta_path(path))?;
    let named = load_tensors(path)?;
    let schema = meta.backbone.schema();
    if schema.len() != named.len() || schema.iter().zip(&named).any(|((a, _), (b, _))| a != b) {
        return Err(DrtlError::Checkpoint(format!(
            "{}: tensor names do not match the backbone schema",
            path.display()
        )));
    }
    let model = RestorationModel::from_params(meta.backbone, named.into_iter().map(|(_, t)| t).collect())?;
    Ok((model, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrnMeta {
    pub q: usize,
    pub d: usize,
    pub classes: Vec<String>,
    pub config: DrnConfig,
    pub config_hash: String,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
}

pub fn save_drn(path: &Path, drn: &Drn, meta: &DrnMeta) -> Result<()> {
    save_tensors(path, &drn.named_params())?;
    write_json(&meta_path(path), meta)
}

pub fn load_drn(path: &Path) -> Result<(Drn, DrnMeta)> {
    let meta: DrnMeta = read_json(&meta_path(path))?;
    let drn = Drn::from_named(meta.config.clone(), meta.classes.clone(), load_tensors(path)?)?;
    Ok((drn, meta))
}
