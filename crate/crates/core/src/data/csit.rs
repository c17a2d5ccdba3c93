//! The CSIT tensor file: `"CSIT"`, version byte, dtype byte (0 = f32,
//! 1 = complex as interleaved f32 pairs), rank byte, `rank` u64 extents,
//! then the row-major little-endian payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CSIT_VERSION: u8 = 1;
const MAGIC: &[u8; 4] = b"CSIT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    C64 = 1,
}

/// Decoded file contents. `data` holds two floats per element for `C64`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawTensor {
    fn floats_per_element(dtype: DType) -> usize {
        match dtype {
            DType::F32 => 1,
            DType::C64 => 2,
        }
    }
}

pub fn encode(t: &RawTensor) -> Result<Vec<u8>> {
    let n: usize = t.dims.iter().product::<usize>() * RawTensor::floats_per_element(t.dtype);
    if n != t.data.len() {
        return Err(Error::Invalid(format!(
            "payload of {} floats does not fit dims {:?}",
            t.data.len(),
            t.dims
        )));
    }
    if t.dims.len() > u8::MAX as usize {
        return Err(Error::Invalid(format!("rank {} too large", t.dims.len())));
    }
    let mut out = Vec::with_capacity(7 + 8 * t.dims.len() + 4 * n);
    out.extend_from_slice(MAGIC);
    out.push(CSIT_VERSION);
    out.push(t.dtype as u8);
    out.push(t.dims.len() as u8);
    for &d in &t.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<RawTensor> {
    let fail = |offset: usize, msg: String| Error::Format {
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 7 {
        return Err(fail(bytes.len(), format!("header needs 7 bytes, file has {}", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(0, "bad magic, expected \"CSIT\"".into()));
    }
    if bytes[4] != CSIT_VERSION {
        return Err(fail(4, format!("unsupported version {}", bytes[4])));
    }
    let dtype = match bytes[5] {
        0 => DType::F32,
        1 => DType::C64,
        other => return Err(fail(5, format!("unknown dtype {other}"))),
    };
    let rank = bytes[6] as usize;
    let payload_at = 7 + 8 * rank;
    if bytes.len() < payload_at {
        return Err(fail(
            bytes.len(),
            format!("dims need {} bytes, file has {}", payload_at, bytes.len()),
        ));
    }
    let dims: Vec<usize> = bytes[7..payload_at]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let floats = dims
        .iter()
        .try_fold(RawTensor::floats_per_element(dtype), |a, &d| a.checked_mul(d))
        .ok_or_else(|| fail(7, "dims overflow".into()))?;
    let expected = floats
        .checked_mul(4)
        .ok_or_else(|| fail(7, "dims overflow".into()))?;
    let actual = bytes.len() - payload_at;
    if actual != expected {
        return Err(fail(
            payload_at + actual.min(expected),
            format!("payload length mismatch: expected {expected} bytes, found {actual}"),
        ));
    }
    let data = bytes[payload_at..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(RawTensor { dtype, dims, data })
}

pub fn write_raw(path: &Path, t: &RawTensor) -> Result<()> {
    std::fs::write(path, encode(t)?)?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<RawTensor> {
    decode(&std::fs::read(path)?)
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_raw(
        path,
        &RawTensor {
            dtype: DType::F32,
            dims: t.dims().to_vec(),
            data: t.data().to_vec(),
        },
    )
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let raw = read_raw(path)?;
    if raw.dtype != DType::F32 {
        return Err(Error::Format {
            offset: 5,
            msg: format!("{} holds complex data, expected f32", path.display()),
        });
    }
    Tensor::new(raw.dims, raw.data)
}
