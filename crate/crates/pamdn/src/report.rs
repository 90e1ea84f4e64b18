//! Batch evaluation: per-image PSNR/SSIM against references and SNR/CNR
//! over ROIs, aggregated as mean +/- std, optionally grouped by noise
//! level. Results go to JSON, an aligned text table, and stdout.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pamdn_core::metrics::{aggregate, auto_rois, cnr, psnr, snr, ssim, Aggregate, RoiSet, PEAK};
use pamdn_core::model::Generator;
use pamdn_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::load_generator;
use crate::manifest::{load_rois, DatasetManifest, RunManifest};
use crate::par::par_map;
use crate::pgm::read_pgm16;
use crate::synth::list_pgm_files;
use crate::tile::denoise_image;

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Dataset manifest (or its directory), or a directory of bare PGMs.
    pub data: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub pred_dir: Option<PathBuf>,
    pub rois: Option<PathBuf>,
    /// Derive SNR/CNR boxes from each clean reference automatically.
    pub auto_rois: bool,
    pub group_by_level: bool,
    pub tile: usize,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cnr_db: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggOut {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    /// Infinite sentinels excluded from the aggregate, with a warning.
    pub excluded: usize,
}

impl From<Aggregate> for AggOut {
    fn from(a: Aggregate) -> AggOut {
        AggOut { mean: a.mean, std: a.std, count: a.count, excluded: a.excluded }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr_db: Option<AggOut>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<AggOut>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<AggOut>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cnr_db: Option<AggOut>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<EvalRow>,
    pub groups: Vec<GroupReport>,
}

struct EvalItem {
    id: String,
    level: Option<String>,
    noisy: Tensor,
    clean: Option<Tensor>,
}

pub fn evaluate(opts: &EvalOptions) -> Result<MetricReport> {
    let items = load_items(&opts.data)?;
    if items.is_empty() {
        bail!("nothing to evaluate under {}", opts.data.display());
    }
    let have_reference = items.iter().all(|i| i.clean.is_some());
    let manual_rois = match &opts.rois {
        Some(path) => Some(load_rois(path)?),
        None => None,
    };
    if !have_reference && manual_rois.is_none() && !opts.auto_rois {
        bail!(
            "no clean references and no RoiSet: nothing can be measured; \
             pass --rois or evaluate a dataset manifest with references"
        );
    }
    if opts.auto_rois && !have_reference {
        bail!("--auto-rois derives boxes from clean references, which this data lacks");
    }

    let generator: Option<(Generator, String)> = match &opts.checkpoint {
        Some(dir) => Some(load_generator(dir)?),
        None => None,
    };

    let rows: Vec<EvalRow> = par_map(&items, |_, item| -> Result<EvalRow> {
        let pred = match (&generator, &opts.pred_dir) {
            (Some((gen, _)), None) => denoise_image(gen, &item.noisy, opts.tile)?,
            (None, Some(dir)) => read_pgm16(&dir.join(&item.id))?,
            (None, None) => item.noisy.clone(),
            (Some(_), Some(_)) => bail!("--checkpoint and --pred-dir are mutually exclusive"),
        };
        let mut row = EvalRow {
            id: item.id.clone(),
            level: item.level.clone(),
            psnr_db: None,
            ssim: None,
            snr_db: None,
            cnr_db: None,
        };
        if let Some(clean) = &item.clean {
            row.psnr_db = Some(psnr(&pred, clean, PEAK)?);
            row.ssim = Some(ssim(&pred, clean)?);
        }
        let rois: Option<RoiSet> = if let Some(manual) = &manual_rois {
            Some(manual.clone())
        } else if opts.auto_rois {
            // a degenerate clean image may defeat automatic placement;
            // that row simply carries no SNR/CNR
            let clean = item.clean.as_ref().expect("checked above");
            let (h, w) = clean.dims2()?;
            auto_rois(clean, (h.min(w) / 8).clamp(6, 24)).ok()
        } else {
            None
        };
        if let Some(rois) = rois {
            row.snr_db = Some(snr(&pred, &rois)?);
            row.cnr_db = Some(cnr(&pred, &rois)?);
        }
        Ok(row)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut groups = Vec::new();
    groups.push(make_group("all", &rows));
    if opts.group_by_level {
        let mut keys: Vec<String> = Vec::new();
        for r in &rows {
            if let Some(l) = &r.level {
                if !keys.contains(l) {
                    keys.push(l.clone());
                }
            }
        }
        // canonical severity order where the standard names are used
        let rank = |k: &String| match k.as_str() {
            "low" => 0,
            "mid" => 1,
            "high" => 2,
            _ => 3,
        };
        keys.sort_by_key(rank);
        for key in keys {
            let subset: Vec<EvalRow> = rows
                .iter()
                .filter(|r| r.level.as_deref() == Some(key.as_str()))
                .cloned()
                .collect();
            groups.push(make_group(&key, &subset));
        }
    }

    let report = MetricReport { rows, groups };
    if let Some(out) = &opts.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        fs::write(out.join("report.txt"), render_table(&report))?;
        let mut manifest = RunManifest::new(
            "eval",
            serde_json::json!({
                "data": opts.data.display().to_string(),
                "checkpoint": opts.checkpoint.as_ref().map(|p| p.display().to_string()),
                "pred_dir": opts.pred_dir.as_ref().map(|p| p.display().to_string()),
                "rois": opts.rois.as_ref().map(|p| p.display().to_string()),
                "auto_rois": opts.auto_rois,
                "group_by_level": opts.group_by_level,
                "tile": opts.tile,
            }),
            None,
        );
        manifest.checkpoint_hash = generator.as_ref().map(|(_, h)| h.clone());
        manifest.artifacts = vec!["report.json".into(), "report.txt".into()];
        manifest.write(out)?;
    }
    Ok(report)
}

fn make_group(key: &str, rows: &[EvalRow]) -> GroupReport {
    let collect = |f: fn(&EvalRow) -> Option<f64>| -> Option<AggOut> {
        let values: Vec<f64> = rows.iter().filter_map(f).collect();
        if values.is_empty() {
            None
        } else {
            Some(aggregate(&values).into())
        }
    };
    GroupReport {
        group: key.to_string(),
        psnr_db: collect(|r| r.psnr_db),
        ssim: collect(|r| r.ssim),
        snr_db: collect(|r| r.snr_db),
        cnr_db: collect(|r| r.cnr_db),
    }
}

/// Aligned text table in the Mean +/- Std style of the paper's results.
pub fn render_table(report: &MetricReport) -> String {
    let mut out = String::new();
    let fmt = |a: &Option<AggOut>| match a {
        Some(a) if a.count > 0 => {
            let warn = if a.excluded > 0 {
                format!(" ({} inf excluded)", a.excluded)
            } else {
                String::new()
            };
            format!("{:.2} +/- {:.2}{warn}", a.mean, a.std)
        }
        _ => "-".to_string(),
    };
    out.push_str(&format!(
        "{:<10} {:>6} {:>24} {:>24} {:>24} {:>24}\n",
        "group", "n", "PSNR (dB)", "SSIM", "SNR (dB)", "CNR (dB)"
    ));
    for g in &report.groups {
        let n = g
            .psnr_db
            .as_ref()
            .or(g.snr_db.as_ref())
            .map_or(0, |a| a.count + a.excluded);
        out.push_str(&format!(
            "{:<10} {:>6} {:>24} {:>24} {:>24} {:>24}\n",
            g.group,
            n,
            fmt(&g.psnr_db),
            fmt(&g.ssim),
            fmt(&g.snr_db),
            fmt(&g.cnr_db)
        ));
    }
    out
}

fn load_items(data: &Path) -> Result<Vec<EvalItem>> {
    let manifest_path = if data.is_dir() {
        data.join(crate::manifest::DATASET_MANIFEST_NAME)
    } else {
        data.to_path_buf()
    };
    if manifest_path.is_file() {
        let manifest = DatasetManifest::load(&manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        return manifest
            .rows
            .iter()
            .map(|row| {
                Ok(EvalItem {
                    id: row.noisy_path.clone(),
                    level: Some(row.level.clone()),
                    noisy: read_pgm16(&base.join(&row.noisy_path))?,
                    clean: Some(read_pgm16(&base.join(&row.clean_path))?),
                })
            })
            .collect();
    }
    if data.is_dir() {
        let files = list_pgm_files(data)?;
        return files
            .iter()
            .map(|f| {
                Ok(EvalItem {
                    id: f.file_name().unwrap().to_string_lossy().into_owned(),
                    level: None,
                    noisy: read_pgm16(f)?,
                    clean: None,
                })
            })
            .collect();
    }
    bail!("{} is neither a dataset manifest nor a directory", data.display());
}
