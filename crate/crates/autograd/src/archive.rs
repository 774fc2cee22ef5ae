//! Binary archive of named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "TAGARCH1"
//! dtype   u8       4 = f32, 8 = f64
//! count   u64
//! repeated count times:
//!   name_len u32, name utf-8 bytes
//!   ndim u32, dims u64 × ndim
//!   values, raw little-endian, product(dims) entries
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{AutogradError, Result};
use crate::params::ParamStore;
use crate::real::{DType, Real};

const MAGIC: &[u8; 8] = b"TAGARCH1";

pub fn encode<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.numel() * T::DTYPE.width());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.width() as u8);
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            v.write_le(&mut out);
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
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| AutogradError::Archive(format!("truncated at byte {}", self.pos)))?;
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

pub fn decode<T: Real>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(AutogradError::Archive("bad magic".into()));
    }
    let width = c.take(1)?[0] as usize;
    let expected: DType = T::DTYPE;
    if width != expected.width() {
        return Err(AutogradError::Archive(format!(
            "archive stores {width}-byte values, reader expects {expected:?}"
        )));
    }
    let count = c.u64()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| AutogradError::Archive(e.to_string()))?
            .to_string();
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(width).ok_or_else(|| AutogradError::Archive("size overflow".into()))?)?;
        let data = raw.chunks_exact(width).map(T::read_le).collect();
        store.insert(name, &shape, data);
    }
    if c.pos != bytes.len() {
        return Err(AutogradError::Archive("trailing bytes".into()));
    }
    Ok(store)
}

pub fn save<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&encode(store))?;
    w.flush()?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<ParamStore<T>> {
    decode(&fs::read(path)?)
}
