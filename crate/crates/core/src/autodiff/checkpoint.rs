//! `CAPW` parameter files: little-endian header `{magic, version u32,
//! n_tensors u32}`, then per tensor `{name_len u32, name, rank u32,
//! dims u32 × rank, f64 × product(dims)}`.

use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CAPW";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

pub fn encode_checkpoint(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for nt in tensors {
        out.extend_from_slice(&(nt.name.len() as u32).to_le_bytes());
        out.extend_from_slice(nt.name.as_bytes());
        let shape = nt.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in nt.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse("checkpoint", format!("truncated {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::parse("checkpoint", "bad magic, expected CAPW"));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedFormat(format!("checkpoint version {version}")));
    }
    let n = c.u32("tensor count")?;
    let mut out = Vec::with_capacity(n as usize);
    for i in 0..n {
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::parse("checkpoint", format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("dims")? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = c.take(count * 8, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(&shape, data)
            .map_err(|e| Error::parse("checkpoint", format!("tensor {name}: {e}")))?;
        out.push(NamedTensor { name, tensor });
    }
    if c.pos != bytes.len() {
        return Err(Error::parse("checkpoint", "trailing bytes after last tensor"));
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    std::fs::write(path, encode_checkpoint(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
