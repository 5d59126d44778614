//! `KDT1` tensor records: magic `KDT1`, `u32` rank, `rank × u32` extents, then
//! the elements as little-endian `f32`, row-major.
//!
//! Values are held as `f64` in memory and rounded to `f32` on write, so a
//! decode → encode cycle is byte-identical and encode → decode returns the
//! `f32`-rounded values exactly.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: [u8; 4] = *b"KDT1";

/// Upper bound on rank accepted when reading, to reject garbage headers early.
const MAX_RANK: u32 = 8;

/// Rounds every value through `f32`, i.e. what a write/read cycle yields.
pub fn round_to_f32(data: &[f64]) -> Vec<f64> {
    data.iter().map(|&v| v as f32 as f64).collect()
}

pub fn write_tensor_raw(w: &mut impl Write, shape: &[usize], data: &[f64]) -> std::io::Result<()> {
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(data.len() * 4);
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    write_tensor_raw(w, t.shape(), t.data())
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Corrupt(format!("truncated {what}: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor_raw(r: &mut impl Read) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Corrupt(format!("truncated tensor header: {e}")))?;
    if magic != TENSOR_MAGIC {
        return Err(Error::Corrupt(format!(
            "bad tensor magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            "KDT1"
        )));
    }
    let rank = read_u32(r, "tensor rank")?;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Corrupt(format!("tensor rank {rank} out of range 1..={MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let d = read_u32(r, "tensor extent")? as usize;
        if d == 0 {
            return Err(Error::Corrupt("zero tensor extent".into()));
        }
        shape.push(d);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= (1 << 31))
        .ok_or_else(|| Error::Corrupt(format!("tensor shape {shape:?} too large")))?;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Corrupt(format!("truncated tensor payload ({n} elements): {e}")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((shape, data))
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let (shape, data) = read_tensor_raw(r)?;
    Tensor::new(&shape, data)
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    write_tensor(&mut buf, t).expect("writing to a Vec cannot fail");
    buf
}

pub fn decode_tensor(mut bytes: &[u8]) -> Result<Tensor> {
    read_tensor(&mut bytes)
}
