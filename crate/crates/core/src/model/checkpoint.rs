//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RFCN" | version: u32
//! repeated until EOF:
//!   name_len: u32 | name: UTF-8 | dtype: u8 (0 = f32) | rank: u32 | dims: u32[rank] | payload: f32[prod(dims)]
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::ParameterSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RFCN";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0} (expected {CHECKPOINT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated at byte {offset}: needed {expected} more bytes, {actual} remain")]
    Truncated {
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("parameter name at byte {0} is not valid UTF-8")]
    InvalidName(usize),
    #[error("parameter `{name}` has unknown dtype tag {tag}")]
    UnknownDtype { name: String, tag: u8 },
    #[error("parameter `{0}` appears twice")]
    DuplicateName(String),
    #[error("parameter `{name}` has invalid shape {dims:?}")]
    InvalidShape { name: String, dims: Vec<usize> },
}

pub fn encode_checkpoint(params: &ParameterSet<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let remaining = self.buf.len() - self.pos;
        if n > remaining {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                expected: n,
                actual: remaining,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParameterSet<f32>, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let mut params = ParameterSet::new();
    while !r.done() {
        let len = r.u32()? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::InvalidName(at))?
            .to_string();
        let tag = r.take(1)?[0];
        if tag != DTYPE_F32 {
            return Err(CheckpointError::UnknownDtype { name, tag });
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&c| c > 0)
            .ok_or_else(|| CheckpointError::InvalidShape {
                name: name.clone(),
                dims: dims.clone(),
            })?;
        let payload = r.take(count.checked_mul(4).ok_or_else(|| CheckpointError::InvalidShape {
            name: name.clone(),
            dims: dims.clone(),
        })?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if params.contains(&name) {
            return Err(CheckpointError::DuplicateName(name));
        }
        let tensor = Tensor::new(&dims, data).map_err(|_| CheckpointError::InvalidShape {
            name: name.clone(),
            dims: dims.clone(),
        })?;
        params.insert(name, tensor);
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ParameterSet<f32>, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParameterSet<f32>, CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}
