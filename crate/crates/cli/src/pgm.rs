//! Binary (P5) PGM export for eyeballing predictions.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use rfcn_core::metrics::extract_contour;
use rfcn_core::Mask;

/// Encodes an 8-bit grayscale image as binary PGM.
pub fn encode(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// The slice image with the predicted contour drawn in white.
pub fn overlay(image: &[f32], mask: &Mask) -> Vec<u8> {
    let mut px: Vec<u8> = image
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 200.0).round() as u8)
        .collect();
    for &(r, c) in extract_contour(mask, 1.0).pixels() {
        px[r * mask.width() + c] = 255;
    }
    px
}

pub fn write(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode(width, height, pixels)).with_context(|| format!("writing {}", path.display()))
}

/// Parses a binary PGM with maxval ≤ 255: `(width, height, pixels)`.
pub fn decode(bytes: &[u8]) -> Option<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if bytes.get(i) == Some(&b'#') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).ok()?.to_string());
    }
    if fields[0] != "P5" {
        return None;
    }
    let width: usize = fields[1].parse().ok()?;
    let height: usize = fields[2].parse().ok()?;
    let maxval: usize = fields[3].parse().ok()?;
    if maxval == 0 || maxval > 255 || !bytes.get(i)?.is_ascii_whitespace() {
        return None;
    }
    let data = &bytes[i + 1..];
    (data.len() == width * height).then(|| (width, height, data.to_vec()))
}
