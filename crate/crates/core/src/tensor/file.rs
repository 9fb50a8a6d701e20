//! On-disk tensor encoding.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "UCPT"
//! 4       2           format version (u16 LE) = 1
//! 6       1           dtype code (0 = f32, 1 = f16, 2 = bf16)
//! 7       1           ndim
//! 8       8 * ndim    dims (u64 LE each)
//! ..      width*numel payload, little-endian elements, no trailing bytes
//! ```

use std::path::Path;

use half::{bf16, f16};

use super::{DType, Storage, Tensor};
use crate::error::{Result, UcpError};

pub const TENSOR_MAGIC: &[u8; 4] = b"UCPT";
pub const TENSOR_FORMAT_VERSION: u16 = 1;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.shape().len() + t.nbytes());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_FORMAT_VERSION.to_le_bytes());
    out.push(t.dtype().code());
    out.push(u8::try_from(t.shape().len()).expect("tensor rank exceeds 255"));
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match t.storage() {
        Storage::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Storage::F16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_bits().to_le_bytes())),
        Storage::BF16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_bits().to_le_bytes())),
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 8 {
        return Err(UcpError::CorruptHeader(format!("{} bytes is shorter than the fixed header", bytes.len())));
    }
    if &bytes[0..4] != TENSOR_MAGIC {
        return Err(UcpError::CorruptHeader(format!("bad magic {:02x?}", &bytes[0..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TENSOR_FORMAT_VERSION {
        return Err(UcpError::CorruptHeader(format!("unsupported version {version}")));
    }
    let dtype = DType::from_code(bytes[6])
        .ok_or_else(|| UcpError::CorruptHeader(format!("unknown dtype code {}", bytes[6])))?;
    let ndim = bytes[7] as usize;
    let header_len = 8 + 8 * ndim;
    if bytes.len() < header_len {
        return Err(UcpError::CorruptHeader(format!("header declares {ndim} dims but is cut short")));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut numel: u64 = 1;
    for chunk in bytes[8..header_len].chunks_exact(8) {
        let d = u64::from_le_bytes(chunk.try_into().unwrap());
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| UcpError::CorruptHeader("element count overflows u64".into()))?;
        shape.push(usize::try_from(d).map_err(|_| UcpError::CorruptHeader(format!("dim {d} too large")))?);
    }
    let expected = numel
        .checked_mul(dtype.width() as u64)
        .ok_or_else(|| UcpError::CorruptHeader("payload size overflows u64".into()))?;
    let payload = &bytes[header_len..];
    let found = payload.len() as u64;
    if found < expected {
        return Err(UcpError::TruncatedPayload { expected, found });
    }
    if found > expected {
        return Err(UcpError::TrailingBytes { extra: found - expected });
    }
    let storage = match dtype {
        DType::F32 => Storage::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::F16 => Storage::F16(
            payload
                .chunks_exact(2)
                .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])))
                .collect(),
        ),
        DType::BF16 => Storage::BF16(
            payload
                .chunks_exact(2)
                .map(|c| bf16::from_bits(u16::from_le_bytes([c[0], c[1]])))
                .collect(),
        ),
    };
    Tensor::from_storage(shape, storage)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| UcpError::io(path, e))?;
    decode_tensor(&bytes)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<u64> {
    let path = path.as_ref();
    let bytes = encode_tensor(t);
    std::fs::write(path, &bytes).map_err(|e| UcpError::io(path, e))?;
    Ok(bytes.len() as u64)
}
