//! `MLT1` tensor blob files.
//!
//! Layout: the four magic bytes `MLT1`, a `u8` dtype code (0 = f32,
//! 1 = f64), a `u8` rank, `rank` little-endian `u32` extents, then the raw
//! little-endian scalars in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{numel, DType, Real, Tensor};
use crate::error::{Error, Result};

pub const BLOB_MAGIC: &[u8; 4] = b"MLT1";

/// A blob whose dtype is only known after reading it.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn into_real<T: Real>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn write_blob_to<T: Real, W: Write>(tensor: &Tensor<T>, mut w: W) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(6 + 4 * tensor.rank() + tensor.len() * T::DTYPE.size_of());
    buf.extend_from_slice(BLOB_MAGIC);
    buf.push(T::DTYPE.code());
    buf.push(tensor.rank() as u8);
    for &e in tensor.shape() {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)
}

pub fn read_blob_from<R: Read>(mut r: R) -> Result<AnyTensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("reading blob: {e}")))?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    if bytes.len() < 6 || &bytes[..4] != BLOB_MAGIC {
        return Err(Error::Format("missing MLT1 magic".into()));
    }
    let dtype = DType::from_code(bytes[4])?;
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("truncated blob header".into()));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let payload = &bytes[header..];
    let expected = numel(&shape) * dtype.size_of();
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "blob payload is {} bytes, shape {shape:?} needs {expected}",
            payload.len()
        )));
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(Tensor::new(
            shape,
            payload.chunks_exact(4).map(f32::read_le).collect(),
        )?),
        DType::F64 => AnyTensor::F64(Tensor::new(
            shape,
            payload.chunks_exact(8).map(f64::read_le).collect(),
        )?),
    })
}

pub fn write_blob<T: Real>(path: &Path, tensor: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_blob_to(tensor, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_blob(path: &Path) -> Result<AnyTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_blob_to(&t, &mut buf).unwrap();
        let mut expected = b"MLT1".to_vec();
        expected.extend_from_slice(&[0, 2, 2, 0, 0, 0, 1, 0, 0, 0]);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = Tensor::<f64>::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_blob_to(&t, &mut buf).unwrap();
        buf.pop();
        assert!(matches!(read_blob_from(&buf[..]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            shape in prop::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
            wide in any::<bool>(),
        ) {
            let n: usize = shape.iter().product();
            let mut rng = crate::rng::SplitMix64::new(seed);
            let vals: Vec<f64> = (0..n).map(|_| rng.normal() * 1e3).collect();
            let mut buf = Vec::new();
            if wide {
                let t = Tensor::<f64>::new(shape.clone(), vals).unwrap();
                write_blob_to(&t, &mut buf).unwrap();
                prop_assert_eq!(read_blob_from(&buf[..]).unwrap(), AnyTensor::F64(t));
            } else {
                let t = Tensor::<f32>::from_f64(shape.clone(), &vals).unwrap();
                write_blob_to(&t, &mut buf).unwrap();
                prop_assert_eq!(read_blob_from(&buf[..]).unwrap(), AnyTensor::F32(t));
            }
        }
    }
}
