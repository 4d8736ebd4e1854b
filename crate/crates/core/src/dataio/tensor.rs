//! "PPRT" raw tensor files.
//!
//! Layout (all little-endian): magic `PPRT`, `u32` version, `u32` rank,
//! `u32` dims\[rank\], then `f32` payload in row-major order. A file may hold
//! several tensors back to back.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"PPRT";
pub const VERSION: u32 = 1;
const MAX_RANK: u32 = 8;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("tensor format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn format_err(msg: impl Into<String>) -> TensorError {
    TensorError::Format(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected: usize = dims.iter().product();
        if dims.is_empty() || expected != data.len() {
            return Err(format_err(format!(
                "dims {dims:?} do not match payload of {} values",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for d in &self.dims {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)
    }

    /// Parses one tensor from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn parse(bytes: &[u8]) -> Result<(Self, usize), TensorError> {
        let mut cursor = Cursor { bytes, pos: 0 };
        if cursor.take(4)? != MAGIC {
            return Err(format_err("bad magic"));
        }
        let version = cursor.u32()?;
        if version != VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let rank = cursor.u32()?;
        if rank == 0 || rank > MAX_RANK {
            return Err(format_err(format!("unsupported rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| cursor.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .ok_or_else(|| format_err("dims overflow"))?;
        let nbytes = count.checked_mul(4).ok_or_else(|| format_err("dims overflow"))?;
        let payload = cursor.take(nbytes)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((Self { dims, data }, cursor.pos))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err("truncated tensor"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, TensorError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Writes `tensors` back to back into `path`.
pub fn save_tensors(path: &Path, tensors: &[Tensor]) -> Result<(), TensorError> {
    let mut buf = Vec::new();
    for t in tensors {
        t.write_to(&mut buf)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Reads every tensor stored in `path`.
pub fn load_tensors(path: &Path) -> Result<Vec<Tensor>, TensorError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_all(&bytes)
}

pub fn parse_all(bytes: &[u8]) -> Result<Vec<Tensor>, TensorError> {
    let mut out = Vec::new();
    let mut rest = bytes;
    while !rest.is_empty() {
        let (t, used) = Tensor::parse(rest)?;
        out.push(t);
        rest = &rest[used..];
    }
    if out.is_empty() {
        return Err(format_err("file holds no tensor"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(t: &Tensor) -> Vec<u8> {
        let mut b = Vec::new();
        t.write_to(&mut b).unwrap();
        b
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2], vec![1.0, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"PPRT");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap();
        let mut b = encode(&t);
        assert!(matches!(parse_all(&b[..b.len() - 1]), Err(TensorError::Format(_))));
        b[0] = b'X';
        assert!(matches!(parse_all(&b), Err(TensorError::Format(_))));
        assert!(matches!(parse_all(&[]), Err(TensorError::Format(_))));
    }

    #[test]
    fn rejects_dims_payload_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        // Header claims 4 values but only 3 follow.
        let mut b = encode(&Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        b[12..16].copy_from_slice(&4u32.to_le_bytes());
        assert!(parse_all(&b).is_err());
    }

    #[test]
    fn file_roundtrip_multiple() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pprt");
        let a = Tensor::new(vec![1, 2], vec![f32::MIN_POSITIVE, -0.0]).unwrap();
        let b = Tensor::new(vec![3], vec![1.0, 2.0, f32::MAX]).unwrap();
        save_tensors(&path, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(load_tensors(&path).unwrap(), vec![a, b]);
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(data in prop::collection::vec(any::<u32>(), 1..64)) {
            let values: Vec<f32> = data.iter().map(|b| f32::from_bits(*b)).collect();
            let t = Tensor::new(vec![values.len()], values).unwrap();
            let back = parse_all(&encode(&t)).unwrap();
            let bits: Vec<u32> = back[0].data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, data);
        }
    }
}
