//! IDX files: big-endian magic and dimension sizes, then raw unsigned bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// `(count, rows, cols, pixels)` from an idx3 image file.
pub fn parse_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let dims = header(path, bytes, IMAGES_MAGIC, 3)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    if rows == 0 || cols == 0 {
        return Err(Error::SizeMismatch {
            path: path.into(),
            detail: format!("image size {rows}x{cols} is empty"),
        });
    }
    let n = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::SizeMismatch {
            path: path.into(),
            detail: format!("dimensions {count}x{rows}x{cols} overflow"),
        })?;
    let payload = payload(path, bytes, 16, n)?;
    Ok((count, rows, cols, payload.to_vec()))
}

pub fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let dims = header(path, bytes, LABELS_MAGIC, 1)?;
    Ok(payload(path, bytes, 8, dims[0])?.to_vec())
}

fn header(path: &Path, bytes: &[u8], magic: u32, ndim: usize) -> Result<Vec<usize>> {
    let len = 4 * (1 + ndim);
    if bytes.len() < 4 {
        return Err(Error::ShortRead {
            path: path.into(),
            needed: len,
            actual: bytes.len(),
        });
    }
    let found = be32(&bytes[..4]);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < len {
        return Err(Error::ShortRead {
            path: path.into(),
            needed: len,
            actual: bytes.len(),
        });
    }
    Ok((0..ndim).map(|i| be32(&bytes[4 + 4 * i..8 + 4 * i]) as usize).collect())
}

fn payload<'a>(path: &Path, bytes: &'a [u8], offset: usize, n: usize) -> Result<&'a [u8]> {
    let needed = offset + n;
    if bytes.len() < needed {
        return Err(Error::ShortRead {
            path: path.into(),
            needed,
            actual: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(Error::SizeMismatch {
            path: path.into(),
            detail: format!("{} trailing bytes after {n} declared items", bytes.len() - needed),
        });
    }
    Ok(&bytes[offset..])
}

fn be32(b: &[u8]) -> u32 {
    u32::from_be_bytes(b.try_into().expect("four bytes"))
}

pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [count, rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
