//! `BRT1` tensor files: magic, `u32` rank, `u32` dims, then `f64` values,
//! all little-endian and row-major.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"BRT1";

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing BRT1 magic".into()));
    }
    let word = |i: usize| -> Result<usize> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
            .ok_or_else(|| Error::Format("truncated BRT1 header".into()))
    };
    let rank = word(4)?;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(word(8 + 4 * i)?);
    }
    let start = 8 + 4 * rank;
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format("BRT1 dims overflow".into()))?;
    let payload = &bytes[start..];
    if Some(payload.len()) != n.checked_mul(8) {
        return Err(Error::Format(format!(
            "BRT1 payload has {} bytes, expected {} for shape {shape:?}",
            payload.len(),
            n.saturating_mul(8)
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&std::fs::read(path)?)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_tensor(t))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let t = Tensor::new(vec![2, 3], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.5, 3.0]).unwrap();
        let back = decode_tensor(&encode_tensor(&t)).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rank_zero_scalar() {
        let t = Tensor::scalar(2.5);
        let bytes = encode_tensor(&t);
        assert_eq!(bytes.len(), 8 + 8);
        let back = decode_tensor(&bytes).unwrap();
        assert_eq!(back.rank(), 0);
        assert_eq!(back.data(), &[2.5]);
    }

    #[test]
    fn truncation_and_magic_errors() {
        let bytes = encode_tensor(&Tensor::zeros(&[4]));
        assert!(matches!(decode_tensor(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        assert!(decode_tensor(&bytes[..6]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_tensor(&bad).is_err());
    }
}
