//! Flat binary layout: little-endian `u32` rank, `u32` extents, then the
//! `f64` payload in row-major order.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub fn write_tensor_bin(t: &Tensor, mut w: impl Write) -> Result<()> {
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_u32(mut r: impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor_bin(mut r: impl Read) -> Result<Tensor> {
    let rank = read_u32(&mut r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Parse {
            line: 0,
            msg: format!("unsupported tensor rank {rank}"),
        });
    }
    let shape = (0..rank)
        .map(|_| read_u32(&mut r).map(|e| e as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::from_vec(&shape, data)
}

/// Human-readable `{"shape": [...], "data": [...]}` form.
pub fn tensor_to_json(t: &Tensor) -> String {
    serde_json::to_string(t).expect("tensors serialize")
}

pub fn tensor_from_json(s: &str) -> Result<Tensor> {
    serde_json::from_str(s).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })
}
