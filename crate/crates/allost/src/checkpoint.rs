//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ALST" | version u32 | count u32 |
//!   count × (name_len u32 | name | dtype u8 | rank u32 | dims u64… | values) |
//! crc32 u32
//! ```
//!
//! The CRC covers every byte between the version field and itself.

use std::fs;
use std::path::Path;

use allost_core::model::ParameterSet;
use allost_core::optim::average_parameters;
use allost_core::{DType, Scalar, Tensor};

use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 4] = b"ALST";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode<F: Scalar>(params: &ParameterSet<F>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.numel() * F::DTYPE.size_of());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, params.len() as u32);
    for (name, t) in params.iter() {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        out.push(F::DTYPE as u8);
        put_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            match F::DTYPE {
                DType::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                DType::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }
    let crc = crc32fast::hash(&out[8..]);
    put_u32(&mut out, crc);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::data(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses checkpoint bytes, converting stored values to `F` if needed.
pub fn decode<F: Scalar>(bytes: &[u8]) -> Result<ParameterSet<F>> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::data("not a checkpoint: bad magic"));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    if crc32fast::hash(&bytes[8..body_end]) != stored {
        return Err(Error::data("checkpoint CRC mismatch"));
    }
    let mut r = Reader {
        buf: &bytes[..body_end],
        pos: 4,
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::data(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::data("checkpoint parameter name is not UTF-8"))?
            .to_string();
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::data(format!("unknown dtype tag {tag}")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(dtype.size_of()).ok_or_else(|| Error::data("checkpoint shape overflow"))?)?;
        let data: Vec<F> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| F::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| F::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        params.insert(&name, Tensor::new(&shape, data)?)?;
    }
    if r.pos != body_end {
        return Err(Error::data("trailing bytes after checkpoint parameters"));
    }
    Ok(params)
}

/// Writes via a temporary file and rename so readers never see a partial file.
pub fn save<F: Scalar>(path: &Path, params: &ParameterSet<F>) -> Result<()> {
    let tmp = path.with_extension("alst.tmp");
    fs::write(&tmp, encode(params)).at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

pub fn load<F: Scalar>(path: &Path) -> Result<ParameterSet<F>> {
    let bytes = fs::read(path).at(path)?;
    decode(&bytes).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Elementwise mean of the checkpoints at `paths`.
pub fn average_checkpoints<F: Scalar>(paths: &[impl AsRef<Path>]) -> Result<ParameterSet<F>> {
    if paths.is_empty() {
        return Err(Error::config("no checkpoints to average"));
    }
    let sets = paths.iter().map(|p| load(p.as_ref())).collect::<Result<Vec<_>>>()?;
    average_parameters(&sets).map_err(|e| Error::data(e.to_string()))
}
