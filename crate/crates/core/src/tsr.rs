//! TSR binary tensor files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! 0..4    magic "TSRF"
//! u32     version (1)
//! u32     dtype code (1 = f32)
//! u32     ndim
//! u32     dims[ndim]
//! f32     data[product(dims)], row-major
//! ```
//!
//! No padding, no checksum. Trailing bytes after the payload are rejected.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TSRF";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 4 * t.rank() + 4 * t.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&DTYPE_F32.to_le_bytes());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!("truncated {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dtype = cur.u32("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {dtype}")));
    }
    let ndim = cur.u32("ndim")? as usize;
    let mut shape = Vec::with_capacity(ndim.min(16));
    let mut count: usize = 1;
    for _ in 0..ndim {
        let d = cur.u32("dims")? as usize;
        if d == 0 {
            return Err(Error::Format("zero-sized dimension".into()));
        }
        count = count.checked_mul(d).ok_or_else(|| Error::Format("element count overflows".into()))?;
        shape.push(d);
    }
    let nbytes = count.checked_mul(4).ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let payload = cur.take(nbytes, "payload")?;
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
