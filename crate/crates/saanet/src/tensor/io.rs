//! SAAT tensor stream format.
//!
//! Record layout: magic `"SAAT"`, version byte, `u8` rank, rank × `u64`
//! little-endian extents, then row-major `f32` little-endian data. Records
//! may be concatenated back to back in one stream; each `read_saat` call
//! consumes exactly one record.
//!
//! Values are stored at 32-bit precision regardless of in-memory width, so a
//! write/read round-trip quantizes to `f32`.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SAAT";
const VERSION: u8 = 1;

pub fn write_saat<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let shape = t.shape();
    if shape.len() > u8::MAX as usize {
        return Err(Error::Contract(format!("rank {} exceeds format limit", shape.len())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, shape.len() as u8])?;
    for &ext in shape {
        w.write_all(&(ext as u64).to_le_bytes())?;
    }
    for v in t.to_vec() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_saat<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Parse(format!("bad tensor magic {:?}", &head[..4])));
    }
    if head[4] != VERSION {
        return Err(Error::Parse(format!("unsupported tensor version {}", head[4])));
    }
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut ext = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut ext)?;
        let e = u64::from_le_bytes(ext);
        if e == 0 || e > u32::MAX as u64 {
            return Err(Error::Parse(format!("implausible extent {e}")));
        }
        shape.push(e as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut quad = [0u8; 4];
    for _ in 0..numel {
        r.read_exact(&mut quad)?;
        data.push(f32::from_le_bytes(quad) as f64);
    }
    Tensor::from_vec(shape, data)
}
