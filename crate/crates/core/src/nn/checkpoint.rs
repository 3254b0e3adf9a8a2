//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "NCDGCKPT"
//! version      u32
//! spec hash    32 bytes (SHA-256 of the model spec JSON)
//! param count  u64      (number of f32 scalars)
//! payload      param count x f32, ParamStore order
//! ```

use std::fs;
use std::path::Path;

use super::{ModelSpec, ParamEntry, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NCDGCKPT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 32 + 8;

pub fn encode(spec: &ModelSpec, params: &ParamStore<f32>) -> Result<Vec<u8>> {
    check_layout(spec, params)?;
    let count = params.scalar_count();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * count);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&spec.hash());
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for e in &params.entries {
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes a checkpoint for `spec`. The stored hash must match the spec.
pub fn decode(spec: &ModelSpec, bytes: &[u8]) -> Result<ParamStore<f32>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Checkpoint(format!(
            "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    if bytes[12..44] != spec.hash() {
        return Err(Error::Checkpoint(
            "spec hash mismatch: checkpoint was written for a different model".into(),
        ));
    }
    let count = u64::from_le_bytes(bytes[44..52].try_into().unwrap()) as usize;
    if count != spec.param_count() {
        return Err(Error::Checkpoint(format!(
            "header declares {count} parameters, model has {}",
            spec.param_count()
        )));
    }
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != 4 * count {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            4 * count
        )));
    }
    let mut offset = 0;
    let mut entries = Vec::new();
    for (name, shape) in spec.param_layout() {
        let n: usize = shape.iter().product();
        let data = payload[4 * offset..4 * (offset + n)]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += n;
        let layer = name.split('.').next().unwrap_or_default().to_string();
        entries.push(ParamEntry {
            name,
            layer,
            tensor: Tensor::new(shape, data)?,
        });
    }
    // The init seed is not part of the format.
    Ok(ParamStore { entries, rng_seed: 0 })
}

pub fn save(path: &Path, spec: &ModelSpec, params: &ParamStore<f32>) -> Result<()> {
    let bytes = encode(spec, params)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, spec: &ModelSpec) -> Result<ParamStore<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(spec, &bytes)
}

fn check_layout(spec: &ModelSpec, params: &ParamStore<f32>) -> Result<()> {
    let layout = spec.param_layout();
    let ok = layout.len() == params.len()
        && layout
            .iter()
            .zip(&params.entries)
            .all(|((n, s), e)| *n == e.name && s.as_slice() == e.tensor.shape());
    if ok {
        Ok(())
    } else {
        Err(Error::Checkpoint("parameters do not follow the model layout".into()))
    }
}
