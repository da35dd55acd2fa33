//! Feature matrix files: `"ALSF" | T u32 | D u32 | T·D f32`, little-endian,
//! row-major.

use std::fs::{self, File};
use std::io::Read;
use std::path::Path;

use allost_core::Tensor;

use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 4] = b"ALSF";

pub fn encode(feats: &Tensor<f32>) -> Result<Vec<u8>> {
    if feats.rank() != 2 {
        return Err(Error::data(format!("feature matrix must be 2-D, got {:?}", feats.shape())));
    }
    let mut out = Vec::with_capacity(12 + feats.numel() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(feats.shape()[0] as u32).to_le_bytes());
    out.extend_from_slice(&(feats.shape()[1] as u32).to_le_bytes());
    for v in feats.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn header(bytes: &[u8]) -> Result<(usize, usize)> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::data("not a feature file: bad magic"));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    Ok((t, d))
}

/// Parses and validates: at least one frame, all values finite.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (t, d) = header(bytes)?;
    if t == 0 || d == 0 {
        return Err(Error::data(format!("empty feature matrix {t}x{d}")));
    }
    let body = &bytes[12..];
    if body.len() != t * d * 4 {
        return Err(Error::data(format!(
            "feature matrix {t}x{d} needs {} bytes, found {}",
            t * d * 4,
            body.len()
        )));
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::data(format!("non-finite feature at frame {}", i / d)));
    }
    Ok(Tensor::new(&[t, d], data)?)
}

pub fn write(path: &Path, feats: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode(feats)?).at(path)
}

pub fn read(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).at(path)?;
    decode(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// `(frames, dim)` from the header alone.
pub fn read_shape(path: &Path) -> Result<(usize, usize)> {
    let mut buf = [0u8; 12];
    File::open(path).and_then(|mut f| f.read_exact(&mut buf)).at(path)?;
    header(&buf).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}
