//! Binary tensor-record format used for checkpoints and graph sidecars.
//!
//! Layout: magic `CRNT`, version u16, then repeated records of
//! (name length u16, UTF-8 name, rank u8, dims u32 each, payload f64).
//! All integers and floats are little-endian.

use super::Tensor;
use crate::error::{Error, Result};
use crate::util::atomic_write;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CRNT";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Serializes named tensors to `path` atomically.
pub fn write_checkpoint(path: &Path, entries: &[(&str, &Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::contract(format!("record name too long: {name}")));
        }
        if tensor.shape().len() > u8::MAX as usize {
            return Err(Error::contract(format!("record rank too high for {name}")));
        }
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(tensor.shape().len() as u8);
        for &dim in tensor.shape() {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &x in tensor.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    atomic_write(path, &buf)
}

/// Reads back every named tensor record in file order.
pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let display = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| Error::io(&display, e))?;
    let mut cursor = Reader { bytes: &bytes, pos: 0, path: &display };

    let magic = cursor.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::config(format!("{display}: bad magic, not a tensor record file")));
    }
    let version = u16::from_le_bytes(cursor.take(2)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::config(format!("{display}: unsupported version {version}")));
    }

    let mut out = Vec::new();
    while !cursor.done() {
        let name_len = u16::from_le_bytes(cursor.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(cursor.take(name_len)?.to_vec())
            .map_err(|_| Error::config(format!("{display}: record name is not UTF-8")))?;
        let rank = cursor.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(cursor.take(4)?.try_into().unwrap()) as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f64::from_le_bytes(cursor.take(8)?.try_into().unwrap()));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::config(format!(
                "{}: truncated record file at byte {}",
                self.path, self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
