//! Flat binary parameter container.
//!
//! Layout: 8-byte magic, `u32` version, `u64` manifest length, a JSON
//! manifest, then the raw little-endian values of every tensor. Manifest
//! entries carry name, shape, dtype and byte offset relative to the start of
//! the value block; `meta` holds caller data such as the model config.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{FanError, Result};
use crate::scalar::{DType, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FANCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

pub fn write_checkpoint<T: Scalar, W: Write>(
    out: &mut W,
    store: &ParamStore<T>,
    meta: &serde_json::Value,
) -> Result<()> {
    let mut blob = Vec::with_capacity(store.numel() * T::DTYPE.size());
    let mut tensors = Vec::with_capacity(store.len());
    for (_, name, t) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            offset: blob.len() as u64,
        });
        for &v in t.data() {
            v.write_le(&mut blob);
        }
    }
    let manifest = serde_json::to_vec(&Manifest { tensors, meta: meta.clone() })?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(manifest.len() as u64).to_le_bytes())?;
    out.write_all(&manifest)?;
    out.write_all(&blob)?;
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(path: &Path, store: &ParamStore<T>, meta: &serde_json::Value) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, store, meta)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads a checkpoint, converting stored values to `T`.
pub fn read_checkpoint<T: Scalar, R: Read>(input: &mut R) -> Result<(ParamStore<T>, serde_json::Value)> {
    let bad = |m: &str| FanError::Checkpoint(m.to_string());
    let mut head = [0u8; 20];
    input.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
    if &head[..8] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(FanError::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(head[12..20].try_into().expect("8 bytes")) as usize;
    let mut manifest = vec![0u8; len];
    input.read_exact(&mut manifest).map_err(|_| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&manifest)?;
    let mut blob = Vec::new();
    input.read_to_end(&mut blob)?;
    let mut store = ParamStore::new();
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * e.dtype.size();
        let bytes = blob.get(start..end).ok_or_else(|| bad("value block too short"))?;
        let data: Vec<T> = match e.dtype {
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().expect("4 bytes"))).expect("finite cast"))
                .collect(),
            DType::F64 => bytes
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes"))).expect("finite cast"))
                .collect(),
        };
        store.add(e.name, Tensor::new(e.shape, data)?);
    }
    Ok((store, manifest.meta))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, serde_json::Value)> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}
