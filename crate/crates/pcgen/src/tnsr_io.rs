//! File IO for the TNSR tensor container.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

pub fn write_tnsr(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .with_context(|| format!("creating directory {}", parent.display()))?;
    }
    fs::write(path, pcgen_core::tnsr::encode(shape, data))
        .with_context(|| format!("writing tensor file {}", path.display()))
}

pub fn read_tnsr(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes =
        fs::read(path).with_context(|| format!("reading tensor file {}", path.display()))?;
    pcgen_core::tnsr::decode(&bytes)
        .map_err(|e| anyhow::anyhow!("decoding {}: {e}", path.display()))
}

/// read_tnsr plus a shape assertion with the file named in the error.
pub fn read_tnsr_expect(path: &Path, want: &[usize]) -> Result<Vec<f32>> {
    let (shape, data) = read_tnsr(path)?;
    if shape != want {
        anyhow::bail!(
            "{} holds shape {shape:?}, expected {want:?}",
            path.display()
        );
    }
    Ok(data)
}
