//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     4 bytes   "AVCK"
//! version   u8        1
//! meta_len  u32       byte length of the metadata string
//! meta      utf-8     free-form JSON describing the model (may be empty)
//! count     u32       number of tensors
//! count x {
//!   name_len u32, name utf-8,
//!   ndim u32, dims u64 x ndim,
//!   payload f64 x product(dims)
//! }
//! ```
//!
//! Tensors are written in lexicographic name order, so identical parameter
//! sets always serialize to identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AVCK";
pub const VERSION: u8 = 1;

pub fn encode(params: &ParamSet, meta: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_values() * 8);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(format!("checkpoint: {e}")))
    }
}

/// Returns the parameters and the metadata string.
pub fn decode(bytes: &[u8]) -> Result<(ParamSet, String)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("checkpoint: bad magic".into()));
    }
    let version = c.take(1)?[0];
    if version != VERSION {
        return Err(Error::Format(format!("checkpoint: unsupported version {version}")));
    }
    let meta_len = c.u32()? as usize;
    let meta = c.string(meta_len)?;
    let count = c.u32()?;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = c.string(name_len)?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n * 8)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data)?;
        t.check_finite(&format!("checkpoint tensor `{name}`"))?;
        map.insert(name, t);
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("checkpoint: {} trailing bytes", bytes.len() - c.pos)));
    }
    Ok((ParamSet::from_map(map), meta))
}

pub fn save(path: &Path, params: &ParamSet, meta: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(params, meta))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamSet, String)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
