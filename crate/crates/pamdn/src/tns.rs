//! File access for the .tns tensor container.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use pamdn_core::Tensor;

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, t.to_tns_bytes()).with_context(|| format!("writing {}", path.display()))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Tensor::from_tns_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))
}
