//! The `LGDT` raw tensor format.
//!
//! Layout: magic `LGDT`, `u32` LE rank, `rank` x `u32` LE dims, then the
//! row-major values as `f32` LE.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{LgdError, Result};

pub const LGDT_MAGIC: &[u8; 4] = b"LGDT";

pub fn write_lgdt<W: Write>(tensor: &Tensor, mut out: W) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * tensor.rank() + 4 * tensor.numel());
    buf.extend_from_slice(LGDT_MAGIC);
    buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

/// Reads one tensor. `source` names the input in error messages.
pub fn read_lgdt<R: Read>(mut input: R, source: &str) -> Result<Tensor> {
    let bad = |reason: &str| LgdError::format(source, reason);
    let mut word = [0u8; 4];
    input
        .read_exact(&mut word)
        .map_err(|_| bad("truncated header"))?;
    if &word != LGDT_MAGIC {
        return Err(bad("bad magic, expected LGDT"));
    }
    input
        .read_exact(&mut word)
        .map_err(|_| bad("truncated rank"))?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank > 16 {
        return Err(bad("rank exceeds 16"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        input
            .read_exact(&mut word)
            .map_err(|_| bad("truncated dims"))?;
        shape.push(u32::from_le_bytes(word) as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= 1 << 30)
        .ok_or_else(|| bad("tensor too large"))?;
    let mut raw = vec![0u8; numel * 4];
    input
        .read_exact(&mut raw)
        .map_err(|_| bad("truncated payload"))?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(&shape, data)
}

impl Tensor {
    pub fn to_lgdt_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_lgdt(self, &mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_lgdt_bytes()).map_err(|e| LgdError::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| LgdError::io(path, e))?;
        let tensor = read_lgdt(bytes.as_slice(), &path.display().to_string())?;
        Ok(tensor)
    }
}
