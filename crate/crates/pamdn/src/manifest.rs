//! JSON manifests: the dataset index written by synthesis, the run
//! manifest every command drops next to its outputs, and the RoiSet
//! interchange format.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pamdn_core::metrics::{RoiBox, RoiSet};
use serde::{Deserialize, Serialize};

pub const RUN_MANIFEST_NAME: &str = "run_manifest.json";
pub const DATASET_MANIFEST_NAME: &str = "manifest.json";

/// One synthetic training pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRow {
    pub clean_path: String,
    pub noisy_path: String,
    pub level: String,
    pub seed: u64,
    /// Amplitude the noisy projection was divided by before clipping.
    pub norm_scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub depth: usize,
    pub pulse_sigma: f64,
    pub zero_noise: bool,
    pub rows: Vec<PairRow>,
}

impl DatasetManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(DATASET_MANIFEST_NAME);
        fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let file = if path.is_dir() { path.join(DATASET_MANIFEST_NAME) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", file.display()))
    }
}

/// Provenance record for every command invocation: enough to replay the
/// run bit-for-bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub artifacts: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extractor_provenance: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_hash: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seed,
            artifacts: Vec::new(),
            extractor_provenance: None,
            checkpoint_hash: None,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RUN_MANIFEST_NAME);
        fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))
    }
}

/// RoiSet interchange: {"signal": [[x, y, w, h], ...], "background": [x, y, w, h]}.
#[derive(Serialize, Deserialize)]
struct RoiSetJson {
    signal: Vec<[usize; 4]>,
    background: [usize; 4],
}

pub fn save_rois(path: &Path, rois: &RoiSet) -> Result<()> {
    let json = RoiSetJson {
        signal: rois.signal.iter().map(|b| [b.x, b.y, b.w, b.h]).collect(),
        background: [rois.background.x, rois.background.y, rois.background.w, rois.background.h],
    };
    fs::write(path, serde_json::to_string_pretty(&json)?)
        .with_context(|| format!("writing {}", path.display()))
}

pub fn load_rois(path: &Path) -> Result<RoiSet> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let json: RoiSetJson =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if json.signal.is_empty() {
        bail!("{}: RoiSet needs at least one signal box", path.display());
    }
    let unbox = |b: [usize; 4]| RoiBox { x: b[0], y: b[1], w: b[2], h: b[3] };
    Ok(RoiSet {
        signal: json.signal.into_iter().map(unbox).collect(),
        background: unbox(json.background),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roi_set_round_trips() {
        let dir = std::env::temp_dir().join(format!("pamdn-manifest-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rois.json");
        let rois = RoiSet {
            signal: vec![
                RoiBox { x: 1, y: 2, w: 5, h: 6 },
                RoiBox { x: 10, y: 12, w: 5, h: 6 },
            ],
            background: RoiBox { x: 20, y: 20, w: 8, h: 8 },
        };
        save_rois(&path, &rois).unwrap();
        assert_eq!(load_rois(&path).unwrap(), rois);
        std::fs::remove_dir_all(dir).ok();
    }
}
