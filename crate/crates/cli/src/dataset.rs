//! Stack directories: a `manifest.json` naming the stack headers, or, without
//! one, every stack header found in the directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rfcn_core::data::{load_stack, STACK_FORMAT};
use rfcn_core::SliceStack;
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "rfcn-manifest/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    /// Header file names relative to the manifest.
    pub stacks: Vec<String>,
}

impl Manifest {
    pub fn new(stacks: Vec<String>) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            stacks,
        }
    }
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(manifest)? + "\n";
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

/// Header paths of the stacks in `dir`, in manifest order or sorted by name.
pub fn stack_headers(dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = dir.join(MANIFEST);
    if manifest.is_file() {
        let text = fs::read_to_string(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
        let m: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", manifest.display()))?;
        if m.format != MANIFEST_FORMAT {
            bail!("{}: unknown manifest format `{}`", manifest.display(), m.format);
        }
        return Ok(m.stacks.iter().map(|s| dir.join(s)).collect());
    }
    let entries = fs::read_dir(dir).with_context(|| format!("reading data directory {}", dir.display()))?;
    let mut headers = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") && is_stack_header(&path) {
            headers.push(path);
        }
    }
    headers.sort();
    Ok(headers)
}

fn is_stack_header(path: &Path) -> bool {
    fs::read_to_string(path)
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .is_some_and(|v| v.get("format").and_then(|f| f.as_str()) == Some(STACK_FORMAT))
}

/// Loads every stack of `dir` and checks that they share one slice size.
pub fn load_dir(dir: &Path) -> Result<Vec<SliceStack>> {
    let headers = stack_headers(dir)?;
    if headers.is_empty() {
        bail!("no stacks found in {}", dir.display());
    }
    let stacks = headers
        .iter()
        .map(|h| load_stack(h).map_err(anyhow::Error::from))
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = (stacks[0].height(), stacks[0].width());
    if let Some(odd) = stacks.iter().find(|s| (s.height(), s.width()) != (h, w)) {
        bail!(
            "stack `{}` is {}x{} but `{}` is {h}x{w}; all stacks must share one size",
            odd.subject,
            odd.height(),
            odd.width(),
            stacks[0].subject
        );
    }
    Ok(stacks)
}

pub fn require_masks(stacks: &[SliceStack]) -> Result<()> {
    if let Some(s) = stacks.iter().find(|s| s.masks().is_none()) {
        bail!("stack `{}` has no ground-truth masks", s.subject);
    }
    Ok(())
}
