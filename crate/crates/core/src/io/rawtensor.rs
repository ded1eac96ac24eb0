//! Raw tensor interchange files.
//!
//! Layout, all little-endian: `b"MNGT"`, version `u32`, rank `u32`, `rank`
//! dims as `u64`, dtype tag `u32` (0 = f32, 1 = i64), then the row-major payload.

use std::fs;
use std::path::Path;

use mngac_tensor::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MNGT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;
pub const DTYPE_I64: u32 = 1;

fn header(dims: &[usize], dtype: u32) -> Vec<u8> {
    let mut b = Vec::with_capacity(16 + 8 * dims.len());
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        b.extend_from_slice(&(d as u64).to_le_bytes());
    }
    b.extend_from_slice(&dtype.to_le_bytes());
    b
}

pub fn encode_f32(t: &Tensor) -> Vec<u8> {
    let mut b = header(t.shape(), DTYPE_F32);
    for &v in t.data() {
        b.extend_from_slice(&(v as f32).to_le_bytes());
    }
    b
}

pub fn encode_i64(dims: &[usize], values: &[i64]) -> Vec<u8> {
    let mut b = header(dims, DTYPE_I64);
    for &v in values {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated file: need {n} bytes at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Dims, dtype tag and payload bytes of an encoded tensor.
fn decode(buf: &[u8]) -> Result<(Vec<usize>, u32, &[u8])> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, expected MNGT".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported raw tensor version {version}")));
    }
    let rank = r.u32()? as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let dtype = r.u32()?;
    let width = match dtype {
        DTYPE_F32 => 4,
        DTYPE_I64 => 8,
        t => return Err(Error::Format(format!("unknown dtype tag {t}"))),
    };
    let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("dims overflow".into()))?;
    let payload = &buf[r.pos..];
    if payload.len() != count * width {
        return Err(Error::Format(format!("payload has {} bytes, dims {dims:?} need {}", payload.len(), count * width)));
    }
    Ok((dims, dtype, payload))
}

pub fn decode_f32(buf: &[u8]) -> Result<Tensor> {
    let (dims, dtype, payload) = decode(buf)?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format("expected an f32 tensor".into()));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    Ok(Tensor::from_vec(&dims, data))
}

pub fn decode_i64(buf: &[u8]) -> Result<(Vec<usize>, Vec<i64>)> {
    let (dims, dtype, payload) = decode(buf)?;
    if dtype != DTYPE_I64 {
        return Err(Error::Format("expected an i64 tensor".into()));
    }
    Ok((dims, payload.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()))
}

pub fn read_f32(path: &Path) -> Result<Tensor> {
    decode_f32(&fs::read(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_i64(path: &Path) -> Result<(Vec<usize>, Vec<i64>)> {
    decode_i64(&fs::read(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_f32(path: &Path, t: &Tensor) -> Result<()> {
    Ok(fs::write(path, encode_f32(t))?)
}

pub fn write_i64(path: &Path, dims: &[usize], values: &[i64]) -> Result<()> {
    Ok(fs::write(path, encode_i64(dims, values))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_truncation() {
        let t = Tensor::from_vec(&[2, 1, 1, 3], vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125]);
        let b = encode_f32(&t);
        assert_eq!(&b[..4], b"MNGT");
        assert_eq!(decode_f32(&b).unwrap(), t);
        assert!(decode_f32(&b[..b.len() - 1]).is_err());
        let l = encode_i64(&[3], &[1, 0, 9]);
        assert_eq!(decode_i64(&l).unwrap(), (vec![3], vec![1, 0, 9]));
        assert!(decode_f32(&l).is_err());
    }
}
