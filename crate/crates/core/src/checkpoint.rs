//! `TTPM` checkpoints.
//!
//! ```text
//! "TTPM" | version u32 = 1 | d, D, d', d_h as u32
//! 11 tensors, each: rows u32 | cols u32 | rows*cols x f64
//! order: theta0 (w1, b1, w2, b2), P_Q, P_K, P_V, head (w1, b1, w2, b2)
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{MetaParams, PARAM_NAMES};
use crate::tensor::Matrix;

pub const MAGIC: [u8; 4] = *b"TTPM";
pub const VERSION: u32 = 1;

pub fn encode(params: &MetaParams) -> Vec<u8> {
    let dims = params.dims();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in [dims.encoder, dims.fused, dims.adapt, dims.head_hidden] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for m in params.iter() {
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<MetaParams> {
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if bytes.len() - pos < n {
            return Err(Error::truncated(format!("checkpoint {what}")));
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    let magic: [u8; 4] = take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
    let version = u32_at(take(4, "version")?) as u32;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mut header = [0usize; 4];
    for h in header.iter_mut() {
        *h = u32_at(take(4, "dimensions")?);
    }
    let mut tensors = Vec::with_capacity(PARAM_NAMES.len());
    for name in PARAM_NAMES {
        let rows = u32_at(take(4, name)?);
        let cols = u32_at(take(4, name)?);
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::truncated(format!("checkpoint {name}")))?;
        let raw = take(n, name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Matrix::from_vec(rows, cols, data)?);
    }
    if pos != bytes.len() {
        return Err(Error::TrailingData(bytes.len() - pos));
    }
    let params = MetaParams::from_tensors(tensors).expect("exactly eleven tensors");
    params.validate()?;
    let dims = params.dims();
    if header != [dims.encoder, dims.fused, dims.adapt, dims.head_hidden] {
        return Err(Error::DimensionMismatch(format!(
            "header dimensions {header:?} disagree with tensor shapes {dims:?}"
        )));
    }
    Ok(params)
}

pub fn save(path: impl AsRef<Path>, params: &MetaParams) -> Result<()> {
    fs::write(path, encode(params))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<MetaParams> {
    decode(&fs::read(path)?)
}
