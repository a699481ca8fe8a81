//! Parameter snapshot files.
//!
//! Flat binary layout, little-endian throughout:
//!
//! ```text
//! magic   8 bytes  "CRNKSNP1"
//! count   u32      number of parameters
//! then per parameter, in set order:
//!   name_len  u32
//!   name      name_len bytes, UTF-8
//!   trainable u8 (0/1)
//!   ndim      u32
//!   dims      ndim x u64
//!   values    product(dims) x f64
//! ```
//!
//! Values are always stored as f64; loading into an f32 set casts down,
//! saving from one casts up (losslessly). An f64 save/load round trip is
//! bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"CRNKSNP1";

pub fn to_bytes<S: Scalar>(set: &ParamSet<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for p in set.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(u8::from(p.trainable));
        let shape = p.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.tensor.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

pub fn from_bytes<S: Scalar>(bytes: &[u8]) -> Result<ParamSet<S>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::InvalidSnapshot("bad magic".into()));
    }
    let count = r.u32()?;
    let mut set = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::InvalidSnapshot("parameter name is not UTF-8".into()))?;
        let trainable = r.u8()? != 0;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(S::from_f64(r.f64()?));
        }
        set.insert(&name, Tensor::from_vec(shape, data)?, trainable)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::InvalidSnapshot(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(set)
}

pub fn save<S: Scalar>(set: &ParamSet<S>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(set))?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<ParamSet<S>> {
    from_bytes(&fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::InvalidSnapshot("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
