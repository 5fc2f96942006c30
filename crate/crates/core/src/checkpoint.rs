//! Binary weight checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PARIC\0"            6 bytes magic
//! version              u16
//! entry count          u32
//! per entry:
//!   name length        u32
//!   name               utf-8 bytes
//!   rank               u32
//!   dims               rank × u32
//!   data               product(dims) × f64
//! sha-256              32 bytes over everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::nn::ParamSet;

pub const MAGIC: &[u8; 6] = b"PARIC\0";
pub const VERSION: u16 = 1;

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Hex SHA-256 of the encoded parameter set.
pub fn fingerprint(params: &ParamSet) -> String {
    let bytes = encode(params);
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamSet> {
    if bytes.len() < MAGIC.len() + 2 + 4 + 32 {
        return Err(Error::Format("checkpoint too short".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(6)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        params.push(name, t);
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ParamSet) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
