//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes   "APE1"
//! block_count  u32
//! per block:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   rows       u64
//!   cols       u64
//!   payload    rows * cols IEEE-754 f64, row-major
//! ```
//!
//! Gradients are not stored. Reading requires the blocks to appear in the
//! same order and with the same names and shapes as the target model.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::param::{ParamBlock, Parameterized};
use super::tensor::Tensor2;
use crate::error::{ApeError, Result};

pub const MAGIC: &[u8; 4] = b"APE1";

pub fn encode_blocks<'a>(blocks: impl IntoIterator<Item = &'a ParamBlock>) -> Vec<u8> {
    let blocks: Vec<&ParamBlock> = blocks.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        let name = b.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(b.value.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(b.value.cols() as u64).to_le_bytes());
        for v in b.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(ApeError::Checkpoint(format!(
                "unexpected end of data at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_blocks(bytes: &[u8]) -> Result<Vec<(String, Tensor2)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(ApeError::Checkpoint("bad magic, expected APE1".into()));
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| ApeError::Checkpoint(format!("block name is not UTF-8: {e}")))?
            .to_string();
        let rows = cur.u64()? as usize;
        let cols = cur.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| ApeError::Checkpoint(format!("block {name} shape overflows")))?;
        let raw = cur.take(n.saturating_mul(8))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor2::from_vec(rows, cols, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(ApeError::Checkpoint(format!(
            "{} trailing bytes after last block",
            bytes.len() - cur.pos
        )));
    }
    Ok(out)
}

/// Overwrites `model`'s parameter values from checkpoint bytes.
pub fn load_into<M: Parameterized + ?Sized>(model: &mut M, bytes: &[u8]) -> Result<()> {
    let decoded = decode_blocks(bytes)?;
    let mut blocks = model.blocks_mut();
    if decoded.len() != blocks.len() {
        return Err(ApeError::Checkpoint(format!(
            "checkpoint has {} blocks, model expects {}",
            decoded.len(),
            blocks.len()
        )));
    }
    for (block, (name, value)) in blocks.iter_mut().zip(decoded) {
        if block.name != name || block.value.shape() != value.shape() {
            return Err(ApeError::Checkpoint(format!(
                "block mismatch: checkpoint {name} {:?}, model {} {:?}",
                value.shape(),
                block.name,
                block.value.shape()
            )));
        }
        if !value.is_finite() {
            return Err(ApeError::Checkpoint(format!("block {name} has non-finite values")));
        }
        block.value = value;
        block.zero_grad();
    }
    Ok(())
}

pub fn save<M: Parameterized + ?Sized>(model: &M, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| ApeError::io(dir, e))?;
        }
    }
    fs::write(path, encode_blocks(model.blocks())).map_err(|e| ApeError::io(path, e))
}

pub fn load<M: Parameterized + ?Sized>(model: &mut M, path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(ApeError::MissingCheckpoint(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| ApeError::io(path, e))?;
    load_into(model, &bytes)
}

/// SHA-256 over the checkpoint encoding of `model`.
pub fn digest<M: Parameterized + ?Sized>(model: &M) -> [u8; 32] {
    Sha256::digest(encode_blocks(model.blocks())).into()
}

/// First eight digest bytes as an integer; enough to detect parameter drift.
pub fn fingerprint<M: Parameterized + ?Sized>(model: &M) -> u64 {
    u64::from_le_bytes(digest(model)[..8].try_into().unwrap())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
