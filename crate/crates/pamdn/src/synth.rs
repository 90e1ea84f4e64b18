//! Dataset synthesis: clean PGM images in, tagged clean/noisy PGM pairs
//! plus a manifest out. Each pair gets its own derived seed, so the
//! result is byte-identical however wide the fan-out runs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pamdn_core::noise::{make_pair_with, sample_noise_spec, NoiseLevel, NoiseSpec};
use pamdn_core::rng::derive_seed;
use pamdn_core::Tensor;

use crate::manifest::{DatasetManifest, PairRow};
use crate::par::par_map;
use crate::pgm::{read_pgm16, write_pgm16};

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub clean_dir: PathBuf,
    pub out: PathBuf,
    pub levels: Vec<NoiseLevel>,
    pub pairs_per_image: usize,
    pub depth: usize,
    pub pulse_sigma: f64,
    pub seed: u64,
    pub zero_noise: bool,
}

pub fn list_pgm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn synthesize(opts: &SynthOptions) -> Result<DatasetManifest> {
    if opts.levels.is_empty() {
        bail!("no noise levels requested");
    }
    if opts.pairs_per_image == 0 {
        bail!("pairs-per-image must be positive");
    }
    let files = list_pgm_files(&opts.clean_dir)?;
    if files.is_empty() {
        bail!("no .pgm images in {}", opts.clean_dir.display());
    }
    let cleans: Vec<Tensor> = files
        .iter()
        .map(|f| read_pgm16(f))
        .collect::<Result<_>>()?;

    struct Job {
        img_idx: usize,
        level: NoiseLevel,
        k: usize,
        seed: u64,
    }
    let mut jobs = Vec::new();
    for (img_idx, _) in cleans.iter().enumerate() {
        for (li, &level) in opts.levels.iter().enumerate() {
            for k in 0..opts.pairs_per_image {
                let label = ((img_idx as u64) << 24) | ((li as u64) << 16) | k as u64;
                jobs.push(Job { img_idx, level, k, seed: derive_seed(opts.seed, label) });
            }
        }
    }

    let results = par_map(&jobs, |_, job| {
        let clean = &cleans[job.img_idx];
        let spec = if opts.zero_noise {
            NoiseSpec::zero()
        } else {
            sample_noise_spec(job.level, job.seed)
        };
        make_pair_with(clean, &spec, derive_seed(job.seed, 7), opts.depth, opts.pulse_sigma)
    });

    fs::create_dir_all(&opts.out).with_context(|| format!("creating {}", opts.out.display()))?;
    let mut rows = Vec::with_capacity(jobs.len());
    for (job, result) in jobs.iter().zip(results) {
        let (noisy, clean, norm_scale) = result?;
        let stem = format!(
            "pair_{:04}_{}_{:02}",
            job.img_idx,
            job.level.as_str(),
            job.k
        );
        let noisy_name = format!("{stem}_noisy.pgm");
        let clean_name = format!("{stem}_clean.pgm");
        write_pgm16(&opts.out.join(&noisy_name), &noisy)?;
        write_pgm16(&opts.out.join(&clean_name), &clean)?;
        rows.push(PairRow {
            clean_path: clean_name,
            noisy_path: noisy_name,
            level: job.level.as_str().to_string(),
            seed: job.seed,
            norm_scale,
        });
    }

    let manifest = DatasetManifest {
        version: 1,
        seed: opts.seed,
        depth: opts.depth,
        pulse_sigma: opts.pulse_sigma,
        zero_noise: opts.zero_noise,
        rows,
    };
    manifest.save(&opts.out)?;
    Ok(manifest)
}

/// A dataset pulled into memory, rows aligned with images.
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub pairs: Vec<(Tensor, Tensor)>,
}

pub fn load_dataset(manifest_path: &Path) -> Result<LoadedDataset> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = if manifest_path.is_dir() {
        manifest_path.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf()
    };
    let pairs = manifest
        .rows
        .iter()
        .map(|row| {
            let noisy = read_pgm16(&base.join(&row.noisy_path))?;
            let clean = read_pgm16(&base.join(&row.clean_path))?;
            if noisy.shape() != clean.shape() {
                bail!("pair {} has mismatched shapes", row.noisy_path);
            }
            Ok((noisy, clean))
        })
        .collect::<Result<_>>()?;
    Ok(LoadedDataset { manifest, pairs })
}

/// Stack [H, W] images at the given indices into (B, 1, H, W) batches.
pub fn stack_batch(pairs: &[(Tensor, Tensor)], indices: &[usize]) -> Result<(Tensor, Tensor)> {
    let (h, w) = pairs[indices[0]].0.dims2()?;
    let mut noisy = Vec::with_capacity(indices.len() * h * w);
    let mut clean = Vec::with_capacity(indices.len() * h * w);
    for &i in indices {
        noisy.extend_from_slice(pairs[i].0.data());
        clean.extend_from_slice(pairs[i].1.data());
    }
    Ok((
        Tensor::from_vec(&[indices.len(), 1, h, w], noisy)?,
        Tensor::from_vec(&[indices.len(), 1, h, w], clean)?,
    ))
}
