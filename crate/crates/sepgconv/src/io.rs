//! On-disk tensor format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size      field
//! 0       4         magic "SGT1"
//! 4       1         dtype code (0 = f32, 1 = f64)
//! 5       1         rank r (0..=8)
//! 6       4*r       dims, u32 each
//! 6+4r    ...       payload: row-major scalars, little-endian
//! ```
//!
//! Readers are strict: wrong magic, unknown dtype, oversized rank, or a
//! payload whose byte length disagrees with the header all fail loudly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SGT1";
pub const MAX_RANK: usize = 8;

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::TensorFile { path: path.to_path_buf(), reason: reason.into() }
}

/// Serialize a tensor to its byte representation.
pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.rank() > MAX_RANK {
        return Err(Error::invalid(format!("tensor rank {} exceeds format max {}", t.rank(), MAX_RANK)));
    }
    for &d in t.shape() {
        if d > u32::MAX as usize {
            return Err(Error::invalid(format!("dimension {} does not fit in u32", d)));
        }
    }
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.numel() * T::DTYPE.size_bytes());
    out.extend_from_slice(&MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.put_le(&mut out);
    }
    Ok(out)
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parse a tensor from bytes. The stored dtype need not match `T`;
/// elements are converted through f64 on mismatch.
pub fn decode_tensor<T: Scalar>(path: &Path, bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 6 {
        return Err(bad(path, format!("file is {} bytes, header needs 6", bytes.len())));
    }
    if bytes[0..4] != MAGIC {
        return Err(bad(path, format!("bad magic {:02x?}, want {:02x?}", &bytes[0..4], MAGIC)));
    }
    let dtype = Dtype::from_code(bytes[4]).ok_or_else(|| bad(path, format!("unknown dtype code {}", bytes[4])))?;
    let rank = bytes[5] as usize;
    if rank > MAX_RANK {
        return Err(bad(path, format!("rank {} exceeds format max {}", rank, MAX_RANK)));
    }
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(bad(path, format!("file too short for rank-{} header", rank)));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for ax in 0..rank {
        let d = u32::from_le_bytes(bytes[6 + 4 * ax..10 + 4 * ax].try_into().unwrap()) as usize;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| bad(path, "element count overflows usize"))?;
        shape.push(d);
    }
    let want = header + numel * dtype.size_bytes();
    if bytes.len() != want {
        return Err(bad(
            path,
            format!("payload length mismatch: file is {} bytes, header implies {}", bytes.len(), want),
        ));
    }
    let payload = &bytes[header..];
    let sz = dtype.size_bytes();
    let data: Vec<T> = match dtype {
        d if d == T::DTYPE => payload.chunks_exact(sz).map(T::read_le).collect(),
        Dtype::F32 => payload.chunks_exact(4).map(|c| T::cast(f32::read_le(c) as f64)).collect(),
        Dtype::F64 => payload.chunks_exact(8).map(|c| T::cast(f64::read_le(c))).collect(),
    };
    Tensor::new(&shape, data)
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(path, &bytes)
}

/// Peek at the stored dtype without reading the payload.
pub fn read_dtype(path: impl AsRef<Path>) -> Result<Dtype> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 6 || bytes[0..4] != MAGIC {
        return Err(bad(path, "not a tensor file"));
    }
    Dtype::from_code(bytes[4]).ok_or_else(|| bad(path, format!("unknown dtype code {}", bytes[4])))
}
