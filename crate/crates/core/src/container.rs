//! Flat binary tensor container.
//!
//! Layout: the magic `LRLC`, a little-endian `u32` version (1), a `u8` dtype
//! code, a `u8` rank, one little-endian `u32` per extent, then the elements as
//! little-endian scalars in row-major order.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LRLC";
pub const VERSION: u32 = 1;

/// A decoded tensor of either element type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            AnyTensor::F32(_) => Dtype::F32,
            AnyTensor::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`, rounding when narrowing.
    pub fn into_tensor<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encoded_len<T>(t: &Tensor<T>) -> usize {
    10 + 4 * t.ndim() + t.numel() * core::mem::size_of::<T>()
}

pub fn encode<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} does not fit the header", t.ndim())));
    }
    out.reserve(encoded_len(t));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE as u8);
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} does not fit the header")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match T::DTYPE {
        Dtype::F32 => t.data().iter().for_each(|v| out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes())),
        Dtype::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.as_f64().to_le_bytes())),
    }
    Ok(())
}

pub fn to_bytes<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode(t, &mut out)?;
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let s = bytes.get(*at..*at + n).ok_or_else(|| Error::Format(format!("truncated {what} at byte offset {}", *at)))?;
    *at += n;
    Ok(s)
}

/// Decodes one container from the front of `bytes`; returns it and the bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(AnyTensor, usize)> {
    let mut at = 0;
    let magic = take(bytes, &mut at, 4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?} at byte offset 0")));
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version} at byte offset 4")));
    }
    let code = take(bytes, &mut at, 1, "dtype")?[0];
    let dtype =
        Dtype::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code} at byte offset 8")))?;
    let ndim = take(bytes, &mut at, 1, "rank")?[0] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(u32::from_le_bytes(take(bytes, &mut at, 4, "extent")?.try_into().unwrap()) as usize);
    }
    let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let len = numel
        .and_then(|n| n.checked_mul(dtype.size_of()))
        .ok_or_else(|| Error::Format(format!("extents {shape:?} overflow")))?;
    let body = take(bytes, &mut at, len, "payload")?;
    let t = match dtype {
        Dtype::F32 => AnyTensor::F32(Tensor::from_vec(
            &shape,
            body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        )?),
        Dtype::F64 => AnyTensor::F64(Tensor::from_vec(
            &shape,
            body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        )?),
    };
    Ok((t, at))
}

/// Decodes a buffer holding exactly one container.
pub fn from_bytes(bytes: &[u8]) -> Result<AnyTensor> {
    let (t, used) = decode(bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after offset {used}", bytes.len() - used)));
    }
    Ok(t)
}
