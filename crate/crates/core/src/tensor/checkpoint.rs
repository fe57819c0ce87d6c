//! Binary checkpoint format.
//!
//! ```text
//! magic    b"PNCK"
//! version  u32
//! dtype    u8          (4 = f32, 8 = f64)
//! meta     u32 len + UTF-8 bytes (free-form JSON written by the caller)
//! count    u32
//! per parameter:
//!   name   u32 len + UTF-8 bytes
//!   ndim   u32, then ndim x u64 dims
//!   values little-endian, dtype-sized
//! ```
//! All integers are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Scalar, Tensor, TensorError};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PNCK";

fn io_err(e: std::io::Error) -> TensorError {
    TensorError::Checkpoint(e.to_string())
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    store: &ParamStore<T>,
    meta: &str,
) -> Result<(), TensorError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(T::DTYPE);
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.names().iter().zip(store.values()) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.extend_from_slice(&T::to_le_bytes_vec(t.data()));
    }
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&buf).map_err(io_err)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        if self.pos + n > self.bytes.len() {
            return Err(TensorError::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TensorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TensorError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, TensorError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| TensorError::Checkpoint("invalid UTF-8".into()))
    }
}

/// A decoded checkpoint: caller metadata plus named tensors in file order.
pub type Checkpoint<T> = (String, Vec<(String, Tensor<T>)>);

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>, TensorError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err)?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if c.take(4)? != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let dtype = c.take(1)?[0];
    if dtype != 4 && dtype != 8 {
        return Err(TensorError::Checkpoint(format!("unknown dtype {dtype}")));
    }
    let meta = c.string()?;
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name = c.string()?;
        let ndim = c.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = c.take(len * dtype as usize)?;
        let data: Vec<T> = if dtype == 4 {
            raw.chunks(4)
                .map(|ch| T::from_f64(f32::from_le_chunk(ch) as f64))
                .collect()
        } else {
            raw.chunks(8)
                .map(|ch| T::from_f64(f64::from_le_chunk(ch)))
                .collect()
        };
        out.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(TensorError::Checkpoint("trailing bytes".into()));
    }
    Ok((meta, out))
}
