//! Binary tensor dump.
//!
//! Layout (little-endian):
//! - magic `LTEN`
//! - version: u32 (= 1)
//! - rank: u8
//! - dims: rank × u32
//! - data: row-major f32

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LTEN";
pub const VERSION: u32 = 1;

pub fn write_tensor(mut w: impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[t.rank() as u8])?;
    for &d in t.dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * t.rank() + 4 * t.len());
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

/// Parse a dump. `origin` only labels errors.
pub fn read_tensor(mut r: impl Read, origin: &str) -> Result<Tensor> {
    let bad = |msg: &str| Error::format(origin, msg.to_string());
    let mut head = [0u8; 9];
    r.read_exact(&mut head)
        .map_err(|_| bad("truncated header"))?;
    if &head[..4] != MAGIC {
        return Err(bad("bad magic, expected LTEN"));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let rank = head[8] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| bad("truncated dims"))?;
        dims.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = dims.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| bad("truncated data"))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(&dims, data).map_err(|e| bad(&e.to_string()))
}
