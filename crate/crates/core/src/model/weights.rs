//! Flat binary tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "TRIPW\0"            6 bytes
//! count   u32
//! per tensor:
//!   name_len u16, name bytes (UTF-8)
//!   rank     u8
//!   dims     u32 * rank
//!   data     f32 * prod(dims), little-endian
//! ```
//!
//! The same encoding is embedded inside checkpoints.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ARCHIVE_MAGIC: &[u8; 6] = b"TRIPW\0";

pub fn encode_archive(entries: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Cursor-based decoder; every bounds failure maps to a checkpoint error.
pub fn decode_archive(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated archive: wanted {n} bytes at offset {pos}, have {}",
                bytes.len() - *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    let magic = take(&mut pos, ARCHIVE_MAGIC.len())?;
    if magic != ARCHIVE_MAGIC {
        return Err(Error::Checkpoint("bad tensor-archive magic".into()));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;

    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = take(&mut pos, numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(&dims, data)));
    }
    if pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after archive payload",
            bytes.len() - pos
        )));
    }
    Ok(entries)
}

pub fn write_archive(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    std::fs::write(path, encode_archive(entries))?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = std::fs::read(path)?;
    decode_archive(&bytes)
}
