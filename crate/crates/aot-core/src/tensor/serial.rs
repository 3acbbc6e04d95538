//! Raw tensor file format, used for checkpoints and identity banks.
//!
//! Layout: magic bytes "AOTT", u8 version = 1, u8 dtype (0 = single,
//! 1 = double), u8 rank, little-endian u32 extents, then the row-major
//! little-endian payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"AOTT";
const VERSION: u8 = 1;

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(7 + 4 * t.rank() + t.numel() * T::byte_width());
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(T::DTYPE as u8);
    if t.rank() > u8::MAX as usize {
        return Err(Error::Shape(format!("tensor rank {} too large", t.rank())));
    }
    buf.push(t.rank() as u8);
    for &e in t.shape() {
        if e > u32::MAX as usize {
            return Err(Error::Shape(format!("extent {e} exceeds u32")));
        }
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes8());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<(Dtype, Vec<usize>, usize)> {
    if bytes.len() < 7 {
        return Err(Error::Parse(format!("{}: truncated header", path.display())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Parse(format!("{}: bad magic", path.display())));
    }
    if bytes[4] != VERSION {
        return Err(Error::Parse(format!(
            "{}: unsupported version {}",
            path.display(),
            bytes[4]
        )));
    }
    let dtype = Dtype::from_tag(bytes[5]).ok_or_else(|| {
        Error::Parse(format!("{}: unknown dtype tag {}", path.display(), bytes[5]))
    })?;
    let rank = bytes[6] as usize;
    if bytes.len() < 7 + 4 * rank {
        return Err(Error::Parse(format!("{}: truncated extents", path.display())));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 7 + 4 * i;
        shape.push(u32::from_le_bytes([
            bytes[off],
            bytes[off + 1],
            bytes[off + 2],
            bytes[off + 3],
        ]) as usize);
    }
    Ok((dtype, shape, 7 + 4 * rank))
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (dtype, shape, payload_off) = parse_header(&bytes, path)?;
    if dtype != T::DTYPE {
        return Err(Error::Parse(format!(
            "{}: dtype {:?} does not match requested element type",
            path.display(),
            dtype
        )));
    }
    let numel: usize = shape.iter().product();
    let width = T::byte_width();
    if bytes.len() != payload_off + numel * width {
        return Err(Error::Parse(format!(
            "{}: payload length {} does not match shape {:?}",
            path.display(),
            bytes.len() - payload_off,
            shape
        )));
    }
    let data: Vec<T> = (0..numel)
        .map(|i| T::from_le_bytes(&bytes[payload_off + i * width..]))
        .collect();
    Tensor::from_vec(&shape, data)
}

/// Peek at a tensor file's dtype without loading the payload.
pub fn read_dtype(path: &Path) -> Result<Dtype> {
    let mut bytes = [0u8; 6];
    let mut f = fs::File::open(path)?;
    f.read_exact(&mut bytes)?;
    if &bytes[0..4] != MAGIC {
        return Err(Error::Parse(format!("{}: bad magic", path.display())));
    }
    if bytes[4] != VERSION {
        return Err(Error::Parse(format!(
            "{}: unsupported version {}",
            path.display(),
            bytes[4]
        )));
    }
    Dtype::from_tag(bytes[5])
        .ok_or_else(|| Error::Parse(format!("{}: unknown dtype tag {}", path.display(), bytes[5])))
}
