//! Stack files: a JSON header plus raw payloads next to it.
//!
//! For a header `name.json`, images live in `name.f32` (little-endian f32,
//! `S·H·W` values, slice-major) and masks, if any, in `name.u8` (one 0/1
//! byte per pixel).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Phase, SliceStack, StackError};
use crate::mask::Mask;

pub const STACK_FORMAT: &str = "rfcn-stack/1";
pub const DTYPE_F32LE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackHeader {
    pub format: String,
    pub subject: String,
    pub phase: Phase,
    #[serde(rename = "S")]
    pub slices: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub spacing_mm: f64,
    pub dtype: String,
    pub has_masks: bool,
}

#[derive(Debug, Error)]
pub enum StackIoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed header: {source}")]
    Header { path: PathBuf, source: serde_json::Error },
    #[error("{path}: not a stack header (format `{found}`, expected `{STACK_FORMAT}`)")]
    BadMagic { path: PathBuf, found: String },
    #[error("{path}: unsupported dtype `{0}`", .dtype)]
    Dtype { path: PathBuf, dtype: String },
    #[error("{path}: payload has {actual} bytes, header implies {expected}")]
    PayloadSize {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: header promises masks but the mask file is missing")]
    MissingMasks { path: PathBuf },
    #[error("{path}: mask byte {offset} is {value}, expected 0 or 1")]
    MaskValue { path: PathBuf, offset: usize, value: u8 },
    #[error("invalid stack: {0}")]
    Stack(#[from] StackError),
}

/// `(header, images, masks)` paths for a header path.
pub fn stack_paths(header: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (
        header.to_path_buf(),
        header.with_extension("f32"),
        header.with_extension("u8"),
    )
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StackIoError + '_ {
    move |source| StackIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_stack(stack: &SliceStack, header_path: impl AsRef<Path>) -> Result<(), StackIoError> {
    let (hp, ip, mp) = stack_paths(header_path.as_ref());
    let header = StackHeader {
        format: STACK_FORMAT.into(),
        subject: stack.subject.clone(),
        phase: stack.phase,
        slices: stack.slices(),
        height: stack.height(),
        width: stack.width(),
        spacing_mm: stack.spacing_mm(),
        dtype: DTYPE_F32LE.into(),
        has_masks: stack.masks().is_some(),
    };
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&hp, json + "\n").map_err(io_err(&hp))?;
    let bytes: Vec<u8> = stack.images().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&ip, bytes).map_err(io_err(&ip))?;
    if let Some(masks) = stack.masks() {
        let bytes: Vec<u8> = masks.iter().flat_map(Mask::to_bytes).collect();
        fs::write(&mp, bytes).map_err(io_err(&mp))?;
    }
    Ok(())
}

pub fn load_stack(header_path: impl AsRef<Path>) -> Result<SliceStack, StackIoError> {
    let (hp, ip, mp) = stack_paths(header_path.as_ref());
    let text = fs::read_to_string(&hp).map_err(io_err(&hp))?;
    // Check the format tag before strict parsing so foreign JSON gets a clear error.
    let loose: serde_json::Value = serde_json::from_str(&text).map_err(|source| StackIoError::Header {
        path: hp.clone(),
        source,
    })?;
    let found = loose.get("format").and_then(|f| f.as_str()).unwrap_or("");
    if found != STACK_FORMAT {
        return Err(StackIoError::BadMagic {
            path: hp,
            found: found.into(),
        });
    }
    let header: StackHeader = serde_json::from_value(loose).map_err(|source| StackIoError::Header {
        path: hp.clone(),
        source,
    })?;
    if header.dtype != DTYPE_F32LE {
        return Err(StackIoError::Dtype {
            path: hp,
            dtype: header.dtype,
        });
    }
    let pixels = header.slices * header.height * header.width;
    let raw = fs::read(&ip).map_err(io_err(&ip))?;
    if raw.len() != pixels * 4 {
        return Err(StackIoError::PayloadSize {
            path: ip,
            expected: pixels * 4,
            actual: raw.len(),
        });
    }
    let images = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let masks = if header.has_masks {
        let raw = match fs::read(&mp) {
            Ok(r) => r,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(StackIoError::MissingMasks { path: mp });
            }
            Err(e) => return Err(io_err(&mp)(e)),
        };
        if raw.len() != pixels {
            return Err(StackIoError::PayloadSize {
                path: mp,
                expected: pixels,
                actual: raw.len(),
            });
        }
        if let Some((offset, &value)) = raw.iter().enumerate().find(|(_, &b)| b > 1) {
            return Err(StackIoError::MaskValue {
                path: mp,
                offset,
                value,
            });
        }
        let plane = header.height * header.width;
        Some(
            raw.chunks_exact(plane)
                .map(|c| Mask::from_bytes(header.height, header.width, c))
                .collect(),
        )
    } else {
        None
    };
    Ok(SliceStack::new(
        header.subject,
        header.phase,
        header.slices,
        header.height,
        header.width,
        header.spacing_mm,
        images,
        masks,
    )?)
}
