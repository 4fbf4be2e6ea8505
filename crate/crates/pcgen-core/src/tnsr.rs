//! "TNSR" container: the on-disk format for weights, fixtures, and dataset
//! arrays.
//!
//! Layout, all little-endian:
//!   magic `TNSR` | u32 version = 1 | u32 dtype (0 = f32) | u32 ndim |
//!   ndim × u64 dims | row-major IEEE-754 f32 payload
//!
//! This module is pure byte-level encode/decode; file IO lives in the `pcgen`
//! crate.

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TNSR";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;

pub fn encode(shape: &[usize], data: &[f32]) -> Vec<u8> {
    let numel: usize = shape.iter().product();
    assert_eq!(numel, data.len(), "shape/payload mismatch");
    let mut out = Vec::with_capacity(16 + shape.len() * 8 + data.len() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let take = |off: usize, len: usize| -> Result<&[u8]> {
        bytes
            .get(off..off + len)
            .ok_or_else(|| Error::data("TNSR: truncated header or payload"))
    };
    if take(0, 4)? != MAGIC {
        return Err(Error::data("TNSR: bad magic bytes"));
    }
    let u32_at = |off: usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(off, 4)?.try_into().unwrap()))
    };
    let version = u32_at(4)?;
    if version != VERSION {
        return Err(Error::data(alloc::format!(
            "TNSR: unsupported version {version}"
        )));
    }
    let dtype = u32_at(8)?;
    if dtype != DTYPE_F32 {
        return Err(Error::data(alloc::format!("TNSR: unsupported dtype {dtype}")));
    }
    let ndim = u32_at(12)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut off = 16;
    for _ in 0..ndim {
        let d = u64::from_le_bytes(take(off, 8)?.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| Error::data("TNSR: dim overflow".to_string()))?);
        off += 8;
    }
    let numel: usize = shape.iter().product();
    let payload = take(off, numel * 4)?;
    if bytes.len() != off + numel * 4 {
        return Err(Error::data("TNSR: trailing bytes after payload"));
    }
    let mut data = Vec::with_capacity(numel);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok((shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let shape = vec![2, 3];
        let data = vec![1.0f32, -2.5, 0.0, 3.25, f32::MIN_POSITIVE, 1e30];
        let bytes = encode(&shape, &data);
        let (s2, d2) = decode(&bytes).unwrap();
        assert_eq!(s2, shape);
        assert_eq!(d2, data);
    }

    #[test]
    fn header_is_as_documented() {
        let bytes = encode(&[1], &[1.0]);
        assert_eq!(&bytes[0..4], b"TNSR");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 0);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 1);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = encode(&[2], &[1.0, 2.0]);
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
        let bytes = encode(&[2], &[1.0, 2.0]);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn scalar_zero_dim() {
        let bytes = encode(&[], &[42.0]);
        let (shape, data) = decode(&bytes).unwrap();
        assert!(shape.is_empty());
        assert_eq!(data, vec![42.0]);
    }
}
