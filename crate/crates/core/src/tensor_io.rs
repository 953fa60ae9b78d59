//! Raw little-endian float32 tensor files.
//!
//! Layout: 16-byte magic (`SELDTENS` padded with NULs), `u32` rank,
//! `rank × u32` dims, then the row-major payload.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 16] = *b"SELDTENS\0\0\0\0\0\0\0\0";

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} hold {n} values, payload has {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }
}

pub fn encode_tensor(dims: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let n: usize = dims.iter().product();
    if n != data.len() {
        return Err(Error::Shape(format!(
            "dims {dims:?} hold {n} values, payload has {}",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(20 + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decodes a tensor; `label` names the source in errors.
pub fn decode_tensor(bytes: &[u8], label: &Path) -> Result<RawTensor> {
    let corrupt = |msg: String| Error::CorruptTensor {
        path: label.to_path_buf(),
        msg,
    };
    if bytes.len() < 20 || bytes[..16] != TENSOR_MAGIC {
        return Err(corrupt("missing magic header".into()));
    }
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| corrupt("truncated header".into()))
    };
    let rank = word(16)? as usize;
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        dims.push(word(20 + 4 * i)? as usize);
    }
    let start = 20 + 4 * rank;
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| corrupt("dimension product overflows".into()))?;
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() != n * 4 {
        return Err(corrupt(format!(
            "payload is {} bytes, dims {dims:?} need {}",
            payload.len(),
            n * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(RawTensor { dims, data })
}

pub fn write_tensor(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    std::fs::write(path, encode_tensor(dims, data)?)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<RawTensor> {
    let bytes = std::fs::read(path)?;
    decode_tensor(&bytes, path)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let bytes = encode_tensor(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(&bytes[..8], b"SELDTENS");
        assert_eq!(bytes.len(), 16 + 4 + 8 + 24);
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[24..28], &3u32.to_le_bytes());
        assert_eq!(&bytes[32..36], &1.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_bad_input() {
        let p = Path::new("x.ten");
        assert!(encode_tensor(&[2, 2], &[1.0]).is_err());
        let mut bytes = encode_tensor(&[2], &[1.0, 2.0]).unwrap();
        bytes.pop();
        let err = decode_tensor(&bytes, p).unwrap_err();
        assert!(err.to_string().contains("x.ten"), "{err}");
        assert!(decode_tensor(b"NOTATENSOR000000000000", p).is_err());
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(data in prop::collection::vec(any::<f32>(), 0..64)) {
            let dims = vec![data.len()];
            let bytes = encode_tensor(&dims, &data).unwrap();
            let t = decode_tensor(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(t.dims, dims);
            let a: Vec<u32> = t.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
