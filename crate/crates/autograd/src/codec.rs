//! FRST tensor snapshot format.
//!
//! ```text
//! magic  "FRST"
//! u16    version (1)
//! u32    tensor count
//! repeated:
//!   u16  name length, then UTF-8 name bytes
//!   u8   rank, then rank × u32 dims
//!   u8   dtype (0 = f64)
//!   payload: numel × f64
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FRST";
pub const VERSION: u16 = 1;
pub const DTYPE_F64: u8 = 0;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("bad magic bytes {0:?}, expected \"FRST\"")]
    BadMagic([u8; 4]),
    #[error("unsupported FRST version {0}")]
    UnsupportedVersion(u16),
    #[error("tensor `{name}`: unsupported dtype code {code}")]
    UnsupportedDtype { name: String, code: u8 },
    #[error("truncated input: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("tensor name at offset {0} is not valid UTF-8")]
    BadName(usize),
    #[error("tensor `{0}` has an empty or zero-sized shape")]
    BadShape(String),
    #[error("{0} trailing bytes after last tensor")]
    TrailingBytes(usize),
    #[error("name `{0}` is too long for the format")]
    NameTooLong(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>, CodecError> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let payload: usize = tensors.iter().map(|(n, t)| n.len() + 8 + 4 * t.rank() + 8 * t.numel()).sum();
    let mut out = Vec::with_capacity(10 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| CodecError::NameTooLong(name.to_string()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(DTYPE_F64);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let available = self.buf.len() - self.pos;
        if available < n {
            return Err(CodecError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes a whole snapshot. Nothing is returned unless every tensor decodes.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, CodecError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(CodecError::BadMagic(magic));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(CodecError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CodecError::BadName(name_at))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let code = r.u8()?;
        if code != DTYPE_F64 {
            return Err(CodecError::UnsupportedDtype { name, code });
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(CodecError::BadShape(name));
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CodecError::BadShape(name.clone()))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| CodecError::BadShape(name.clone()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|_| CodecError::BadShape(name.clone()))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(CodecError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(out)
}

pub fn save<'a>(
    path: impl AsRef<Path>,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<(), CodecError> {
    let path = path.as_ref();
    let bytes = encode(tensors)?;
    fs::write(path, bytes).map_err(|source| CodecError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>, CodecError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CodecError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}
