//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LASC" | u32 version | u32 len | config as key=value lines (len bytes)
//! u32 param count
//! per param: u32 name len | name | u32 ndim | u32 dims… | u8 bits (32|64) | row-major data
//! ```

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use super::{LasConfig, LasModel};
use crate::numerics::{Precision, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LASC";
pub const VERSION: u32 = 1;

/// Writes `model`, storing every tensor at `precision`.
pub fn save(model: &LasModel, path: &Path, precision: Precision) -> Result<()> {
    let bytes = encode(model, precision);
    crate::harness::write_atomic(path, &bytes)
}

fn encode(model: &LasModel, precision: Precision) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg: String = model
        .config
        .to_pairs()
        .into_iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(cfg.as_bytes());
    put_u32(&mut out, model.params.names().len());
    let _ = model.params.map(&mut |name, t| {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.ndim());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        out.push(precision.bits());
        for &x in t.data() {
            match precision {
                Precision::F64 => out.extend_from_slice(&x.to_le_bytes()),
                Precision::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
            }
        }
    });
    out
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Reads a checkpoint. Returns the model and the precision its tensors
/// were stored at.
pub fn load(path: &Path) -> Result<(LasModel, Precision)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Like [`load`], but fails unless the stored configuration equals
/// `expected`, naming the first differing field.
pub fn load_expecting(path: &Path, expected: &LasConfig) -> Result<(LasModel, Precision)> {
    let (model, precision) = load(path)?;
    for ((key, want), (_, found)) in expected.to_pairs().into_iter().zip(model.config.to_pairs()) {
        if want != found {
            return Err(Error::Checkpoint(format!(
                "configuration mismatch in {key}: expected {want}, found {found}"
            )));
        }
    }
    Ok((model, precision))
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let remaining = self.0.get_ref().len() - self.0.position() as usize;
        if n > remaining {
            return Err(Error::Checkpoint(format!(
                "file truncated: needed {n} more bytes, {remaining} left"
            )));
        }
        let mut buf = vec![0; n];
        self.0.read_exact(&mut buf).expect("length checked");
        Ok(buf)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.bytes(n)?).map_err(|_| Error::Checkpoint("invalid UTF-8 text".into()))
    }
}

fn decode(bytes: &[u8]) -> Result<(LasModel, Precision)> {
    let mut r = Reader(Cursor::new(bytes));
    if r.bytes(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a LASC checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!(
            "unsupported version: expected {VERSION}, found {version}"
        )));
    }
    let cfg_text = r.string()?;
    let mut pairs = BTreeMap::new();
    for line in cfg_text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed configuration line {line:?}")))?;
        pairs.insert(k.to_string(), v.to_string());
    }
    let config = LasConfig::from_pairs(&pairs)?;
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("stored configuration is invalid: {e}")))?;
    let template = LasModel::zeros(config)?;

    let count = r.u32()?;
    let names = template.params.names();
    if count != names.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters, found {count}",
            names.len()
        )));
    }
    let expected = template.tensors();
    let mut tensors = Vec::with_capacity(count);
    let mut bits_seen = Vec::new();
    for (name, want) in names.iter().zip(&expected) {
        let found = r.string()?;
        if &found != name {
            return Err(Error::Checkpoint(format!(
                "parameter order: expected {name}, found {found}"
            )));
        }
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if shape != want.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: expected shape {:?}, found {shape:?}",
                want.shape()
            )));
        }
        let bits = r.bytes(1)?[0];
        let n = want.len();
        let data: Vec<f64> = match bits {
            64 => r
                .bytes(8 * n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            32 => r
                .bytes(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            other => {
                return Err(Error::Checkpoint(format!(
                    "{name}: expected precision flag 32 or 64, found {other}"
                )))
            }
        };
        bits_seen.push(bits);
        tensors.push(Tensor::new(&shape, data)?);
    }
    if (r.0.position() as usize) != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last parameter".into()));
    }
    let precision = if bits_seen.iter().all(|&b| b == 32) {
        Precision::F32
    } else {
        Precision::F64
    };
    Ok((template.with_tensors(&tensors)?, precision))
}
