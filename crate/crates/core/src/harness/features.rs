//! `LASF` feature files.
//!
//! ```text
//! "LASF" | u32 version | u32 T | u32 D | T·D f32, row-major, little-endian
//! ```

use std::path::Path;

use crate::numerics::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LASF";
pub const VERSION: u32 = 1;

/// Serializes a `[T × D]` matrix. Values are rounded to `f32`.
pub fn encode(features: &Tensor) -> Result<Vec<u8>> {
    if features.ndim() != 2 {
        return Err(Error::Input(format!("features must be 2-D, got {:?}", features.shape())));
    }
    let mut out = Vec::with_capacity(16 + 4 * features.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(features.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(features.cols() as u32).to_le_bytes());
    for &x in features.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |d: String| Error::format(path, d);
    if bytes.len() < 16 {
        return Err(bad(format!("{} bytes is too short for a header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic, not a LASF file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    if word(4) != VERSION as usize {
        return Err(bad(format!("unsupported version {}", word(4))));
    }
    let (t, d) = (word(8), word(12));
    let want = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("dimensions overflow".into()))?;
    if bytes.len() - 16 != want {
        return Err(bad(format!("expected {want} data bytes for {t}×{d}, found {}", bytes.len() - 16)));
    }
    let data: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if data.iter().any(|x| !x.is_finite()) {
        return Err(bad("non-finite feature value".into()));
    }
    Tensor::new(&[t, d], data)
}

pub fn write(path: &Path, features: &Tensor) -> Result<()> {
    super::write_atomic(path, &encode(features)?)
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
