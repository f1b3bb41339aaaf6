//! Binary parameter checkpoints.
//!
//! Layout (little endian): magic `DIFW`, `u32` version, `u32` tensor count,
//! then per tensor: `u32` name length, UTF-8 name, `u32` rank, rank x `u64`
//! extents, `f32` values.

use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DIFW";
pub const CHECKPOINT_VERSION: u32 = 1;

pub type NamedTensor = (String, Tensor<f32>);

pub fn write_checkpoint<W: Write, T: Scalar>(mut w: W, tensors: &[(String, &Tensor<T>)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            TensorError::Format(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<NamedTensor>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Format(format!(
            "bad magic: expected {:?}, found {:?}",
            String::from_utf8_lossy(CHECKPOINT_MAGIC),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::UnsupportedVersion {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let count = c.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let name_len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|e| TensorError::Format(format!("tensor {i} name is not UTF-8: {e}")))?
            .to_string();
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(c.u64("extent")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| TensorError::Format(format!("tensor {name} extents overflow")))?;
        let bytes = c.take(numel.saturating_mul(4), "tensor data")?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if c.pos != buf.len() {
        return Err(TensorError::Format(format!(
            "{} trailing bytes after last tensor",
            buf.len() - c.pos
        )));
    }
    Ok(out)
}
