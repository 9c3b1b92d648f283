//! Parameter checkpoints.
//!
//! Layout, all little-endian: magic `EDGW`, `u32` entry count, then per
//! entry `u32` name length, UTF-8 name bytes, `u32` rank, `rank x u32`
//! dims and the `f32` payload.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{ParamSet, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EDGW";

pub fn encode<T: Scalar>(params: &ParamSet<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for e in params.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in e.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointMismatch("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

/// Parses a checkpoint into named tensors.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointMismatch("missing EDGW magic".into()));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::CheckpointMismatch("non-UTF-8 parameter name".into()))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = r
            .take(numel * 4)?
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::CheckpointMismatch("trailing bytes after last entry".into()));
    }
    Ok(out)
}

pub fn save<T: Scalar>(params: &ParamSet<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

/// Loads values into `params`; every name and shape must match exactly.
pub fn load_into<T: Scalar>(params: &mut ParamSet<T>, bytes: &[u8]) -> Result<()> {
    let entries = decode::<T>(bytes)?;
    if entries.len() != params.len() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint has {} tensors, model has {}",
            entries.len(),
            params.len()
        )));
    }
    let mut by_name: HashMap<String, Tensor<T>> = entries.into_iter().collect();
    let ids: Vec<_> = params.ids().collect();
    for &id in &ids {
        let name = params.name(id).to_string();
        let t = by_name
            .remove(&name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("checkpoint lacks {name}")))?;
        if t.shape() != params.value(id).shape() {
            return Err(Error::CheckpointMismatch(format!(
                "{name}: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                params.value(id).shape()
            )));
        }
    }
    // second pass only after everything validated
    let entries = decode::<T>(bytes)?;
    for (name, t) in entries {
        let id = params.id(&name).expect("validated");
        *params.value_mut(id) = t;
    }
    Ok(())
}

pub fn load<T: Scalar>(params: &mut ParamSet<T>, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_into(params, &bytes)
}
