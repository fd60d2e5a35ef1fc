//! Binary tensor container used to persist perturbations and frames.
//!
//! Layout: magic `UAPT`, version byte `0x01`, dtype byte (`0x01` = f32),
//! ndim byte, `ndim` little-endian `u32` dimensions, then the row-major
//! little-endian payload.

use std::fs;
use std::path::Path;

use ndarray::{Array3, ArrayView3};

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UAPT";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F32: u8 = 0x01;

/// Dense f32 tensor of arbitrary rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected = element_count(&dims)
            .ok_or_else(|| Error::Argument(format!("tensor dims {dims:?} overflow")))?;
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_array3(a: ArrayView3<'_, f32>) -> Self {
        let (h, w, c) = a.dim();
        Tensor {
            dims: vec![h, w, c],
            data: a.iter().copied().collect(),
        }
    }

    /// Narrows an f64 field to f32 storage.
    pub fn from_array3_f64(a: ArrayView3<'_, f64>) -> Self {
        let (h, w, c) = a.dim();
        Tensor {
            dims: vec![h, w, c],
            data: a.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_array3(&self) -> Result<Array3<f32>> {
        match self.dims.as_slice() {
            &[h, w, c] => Array3::from_shape_vec((h, w, c), self.data.clone())
                .map_err(|e| Error::Shape(e.to_string())),
            &[h, w] => Array3::from_shape_vec((h, w, 1), self.data.clone())
                .map_err(|e| Error::Shape(e.to_string())),
            other => Err(Error::Shape(format!(
                "expected a 2- or 3-dimensional tensor, got dims {other:?}"
            ))),
        }
    }

    pub fn to_array3_f64(&self) -> Result<Array3<f64>> {
        Ok(self.to_array3()?.mapv(f64::from))
    }
}

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    if t.dims.len() > u8::MAX as usize {
        return Err(Error::Argument(format!("rank {} exceeds 255", t.dims.len())));
    }
    if element_count(&t.dims) != Some(t.data.len()) {
        return Err(Error::Shape("tensor dims disagree with payload".into()));
    }
    if t.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("tensor has non-finite values".into()));
    }
    let mut out = Vec::with_capacity(7 + 4 * t.dims.len() + 4 * t.data.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.push(t.dims.len() as u8);
    for &d in &t.dims {
        let d = u32::try_from(d)
            .map_err(|_| Error::Argument(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses a tensor from untrusted bytes.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let header = bytes
        .get(..7)
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    if &header[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected UAPT".into()));
    }
    if header[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {:#04x}", header[4])));
    }
    if header[5] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype {:#04x}", header[5])));
    }
    let ndim = header[6] as usize;
    let dims_end = 7 + 4 * ndim;
    let dim_bytes = bytes
        .get(7..dims_end)
        .ok_or_else(|| Error::Format("truncated dimension list".into()))?;
    let dims: Vec<usize> = dim_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = element_count(&dims)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
    let payload = &bytes[dims_end..];
    if payload.len() < count {
        return Err(Error::Format(format!(
            "truncated payload: dims {dims:?} need {count} bytes, found {}",
            payload.len()
        )));
    }
    if payload.len() > count {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            payload.len() - count
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("payload contains non-finite values".into()));
    }
    Ok(Tensor { dims, data })
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(t)?)?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_small() {
        let t = Tensor::new(vec![2, 3, 1], vec![0.0, 0.25, -1.5, 3.0, 1e-7, 0.5]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.uapt");
        save_tensor(&t, &p).unwrap();
        assert_eq!(load_tensor(&p).unwrap(), t);
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = encode(&t).unwrap();
        assert_eq!(&b[..7], b"UAPT\x01\x01\x02");
        assert_eq!(&b[7..11], &1u32.to_le_bytes());
        assert_eq!(&b[11..15], &2u32.to_le_bytes());
        assert_eq!(&b[15..19], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 23);
    }

    #[test]
    fn wrong_magic() {
        let mut b = encode(&Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(Error::Format(m)) if m.contains("magic")));
    }

    #[test]
    fn version_mismatch() {
        let mut b = encode(&Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        b[4] = 2;
        assert!(matches!(decode(&b), Err(Error::Format(m)) if m.contains("version")));
    }

    #[test]
    fn truncated_payload() {
        let mut b = Vec::new();
        b.extend_from_slice(b"UAPT\x01\x01\x02");
        b.extend_from_slice(&4u32.to_le_bytes());
        b.extend_from_slice(&4u32.to_le_bytes());
        for i in 0..12 {
            b.extend_from_slice(&(i as f32).to_le_bytes());
        }
        assert!(matches!(decode(&b), Err(Error::Format(m)) if m.contains("truncated")));
    }

    #[test]
    fn huge_dims_do_not_allocate() {
        let mut b = Vec::new();
        b.extend_from_slice(b"UAPT\x01\x01\x03");
        for _ in 0..3 {
            b.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(decode(&b).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(
            dims in proptest::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits(((seed.wrapping_mul(i as u64 + 1) >> 9) as u32) & 0x3fff_ffff))
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = decode(&encode(&t).unwrap()).unwrap();
            prop_assert_eq!(back.dims, t.dims);
            let a: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = t.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
