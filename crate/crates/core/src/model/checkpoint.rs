//! Binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MSTR"            4 bytes magic
//! version           u32
//! spec digest       32 bytes, SHA-256 of the model spec's canonical JSON
//! tensor count      u32
//! per tensor:
//!   rank            u32
//!   extents         rank × u32
//!   values          product(extents) × f64
//! ```
//!
//! Parameters are written in the order the model declares them (stage by
//! stage). The same container stores PCA bases.

use std::fs;
use std::path::Path;

use super::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSTR";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_tensor_file(path: &Path, digest: &[u8; 32], tensors: &[Tensor]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(digest);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Returns the stored digest and tensors.
pub fn read_tensor_file(path: &Path) -> Result<([u8; 32], Vec<Tensor>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        at: 0,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic (expected \"MSTR\")"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::format(path, "tensor too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::from_vec(&shape, data)?);
    }
    if r.at != bytes.len() {
        return Err(Error::format(path, "trailing bytes after the last tensor"));
    }
    Ok((digest, tensors))
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    write_tensor_file(path, &model.spec().digest(), model.params())
}

/// Loads parameters for `spec`, refusing files written for another spec.
pub fn load_checkpoint(spec: &ModelSpec, path: &Path) -> Result<Model> {
    let (digest, tensors) = read_tensor_file(path)?;
    if digest != spec.digest() {
        return Err(Error::format(
            path,
            "checkpoint was written for a different model spec",
        ));
    }
    Model::with_params(spec.clone(), tensors)
}
