//! Binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"SHRT" | version: u32 | rank: u32 | dims: rank × u64 | payload: Π dims × f32
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Result, ShearsError};
use crate::linalg::DenseMatrix;

pub const MAGIC: &[u8; 4] = b"SHRT";
pub const VERSION: u32 = 1;

pub fn encode(dims: &[u64], data: &[f32]) -> Result<Vec<u8>> {
    let expected: u64 = dims.iter().product();
    if expected != data.len() as u64 {
        return Err(ShearsError::Format(format!(
            "dims {dims:?} describe {expected} values, payload has {}",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(12 + 8 * dims.len() + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Vec<u64>, Vec<f32>)> {
    let err = |m: String| Err(ShearsError::Format(m));
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return err("missing SHRT magic".into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return err(format!("unsupported version {version}"));
    }
    let rank = u32_at(8) as usize;
    let header = 12 + 8 * rank;
    if bytes.len() < header {
        return err("truncated header".into());
    }
    let dims: Vec<u64> = (0..rank)
        .map(|i| {
            let o = 12 + 8 * i;
            u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap())
        })
        .collect();
    let count = dims
        .iter()
        .try_fold(1u64, |acc, d| acc.checked_mul(*d))
        .ok_or_else(|| ShearsError::Format("dims overflow".into()))?;
    if (bytes.len() - header) as u64 != count * 4 {
        return err(format!(
            "payload is {} bytes, dims {dims:?} need {}",
            bytes.len() - header,
            count * 4
        ));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, data))
}

pub fn write_matrix(path: &Path, m: &DenseMatrix) -> Result<()> {
    let bytes = encode(&[m.rows() as u64, m.cols() as u64], m.as_slice())?;
    fs::write(path, bytes).map_err(|e| ShearsError::io(path, e))
}

/// Reads a rank-2 tensor (rank-1 tensors load as a single row).
pub fn read_matrix(path: &Path) -> Result<DenseMatrix> {
    let bytes = fs::read(path).map_err(|e| ShearsError::io(path, e))?;
    let (dims, data) = decode(&bytes)?;
    match dims.as_slice() {
        [n] => DenseMatrix::new(1, *n as usize, data),
        [r, c] => DenseMatrix::new(*r as usize, *c as usize, data),
        _ => Err(ShearsError::Format(format!(
            "{}: expected rank 1 or 2, got dims {dims:?}",
            path.display()
        ))),
    }
}
