//! The training run loop: seeded batch shuffling over a loaded dataset,
//! JSONL loss logging, periodic checkpoints, abort-with-dump on
//! non-finite losses, and resume with an exactly continued trajectory.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use pamdn_core::losses::{ExtractorStage, LossWeights, PerceptualExtractor};
use pamdn_core::model::{ConvParams, Discriminator, Generator, Scale};
use pamdn_core::train::{LossRecord, TrainerConfig};
use pamdn_core::Tensor;

use crate::checkpoint::{fresh_state, load_checkpoint, save_checkpoint, state_hash};
use crate::manifest::RunManifest;
use crate::synth::{load_dataset, stack_batch};
use crate::tns::load_tensor;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub data: PathBuf,
    pub out: PathBuf,
    pub scale: Scale,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub d_steps_per_g_step: u32,
    pub weight_override: Option<LossWeights>,
    pub with_gc: bool,
    pub resume: Option<PathBuf>,
    pub perceptual_weights: Option<PathBuf>,
}

impl TrainOptions {
    pub fn desk_default(data: PathBuf, out: PathBuf) -> TrainOptions {
        TrainOptions {
            data,
            out,
            scale: Scale::Eighth,
            steps: 2000,
            batch_size: 8,
            lr: 1e-4,
            seed: 0,
            checkpoint_interval: 500,
            d_steps_per_g_step: 1,
            weight_override: None,
            with_gc: true,
            resume: None,
            perceptual_weights: None,
        }
    }
}

pub struct TrainSummary {
    pub steps_run: u64,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub checkpoint_hash: String,
    pub last_record: Option<LossRecord>,
}

/// Build the frozen perceptual extractor: seeded by default, or a
/// single-stage stack around an externally supplied conv kernel.
pub fn build_extractor(
    seed: u64,
    weights: Option<&PathBuf>,
) -> Result<(PerceptualExtractor, String)> {
    match weights {
        None => Ok((PerceptualExtractor::seeded(seed), format!("seeded:{seed}"))),
        Some(path) => {
            let weight = load_tensor(path)?;
            let shape = weight.shape().to_vec();
            if shape.len() != 4 || shape[1] != 1 {
                bail!(
                    "external perceptual weights must be (out_c, 1, k, k), got {shape:?} in {}",
                    path.display()
                );
            }
            let bias = Tensor::zeros(&[shape[0]]);
            let ext = PerceptualExtractor::from_stages(vec![ExtractorStage {
                conv: ConvParams { weight, bias },
                relu: true,
                pool: false,
            }])?;
            Ok((ext, format!("external:{}", path.display())))
        }
    }
}

pub fn run_training(opts: &TrainOptions) -> Result<TrainSummary> {
    if opts.steps == 0 {
        bail!("training needs --steps > 0");
    }
    if opts.batch_size < 2 {
        bail!("batch size {} is below the discriminator's minimum of 2", opts.batch_size);
    }

    let dataset = load_dataset(&opts.data)?;
    if dataset.pairs.len() < opts.batch_size {
        bail!(
            "dataset has {} pairs, fewer than the batch size {}",
            dataset.pairs.len(),
            opts.batch_size
        );
    }
    let (h, w) = dataset.pairs[0].0.dims2()?;
    if h % 16 != 0 || w % 16 != 0 {
        bail!("dataset images are {h}x{w}; the generator needs multiples of 16");
    }
    for (i, (n, c)) in dataset.pairs.iter().enumerate() {
        if n.dims2()? != (h, w) || c.dims2()? != (h, w) {
            bail!("pair {i} has a different size than the first pair");
        }
    }

    let mut state = match &opts.resume {
        Some(ckpt) => {
            let state = load_checkpoint(ckpt, Some(opts.scale))
                .with_context(|| format!("resuming from {}", ckpt.display()))?;
            if opts.steps != state.trainer.config.total_steps {
                bail!(
                    "--steps {} disagrees with the checkpoint schedule of {} total steps",
                    opts.steps,
                    state.trainer.config.total_steps
                );
            }
            if state.perm.len() != dataset.pairs.len() {
                bail!(
                    "checkpoint was built against a dataset of {} pairs, this one has {}",
                    state.perm.len(),
                    dataset.pairs.len()
                );
            }
            if state.batch_size != opts.batch_size {
                bail!(
                    "--batch {} disagrees with the checkpoint batch size {}",
                    opts.batch_size,
                    state.batch_size
                );
            }
            state
        }
        None => {
            let config = TrainerConfig {
                lr: opts.lr,
                total_steps: opts.steps,
                d_steps_per_g_step: opts.d_steps_per_g_step,
                weight_override: opts.weight_override,
            };
            let gen = Generator::build_custom(opts.seed, opts.scale, opts.with_gc)?;
            let disc = Discriminator::build(opts.seed, opts.scale)?;
            let (extractor, provenance) =
                build_extractor(opts.seed, opts.perceptual_weights.as_ref())?;
            fresh_state(
                gen,
                disc,
                extractor,
                provenance,
                config,
                opts.seed,
                dataset.pairs.len(),
                opts.batch_size,
            )?
        }
    };

    fs::create_dir_all(&opts.out).with_context(|| format!("creating {}", opts.out.display()))?;
    let log_path = opts.out.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );

    let total = state.trainer.config.total_steps;
    let batch = state.batch_size;
    let mut last_record = None;
    while state.trainer.step < total {
        if state.cursor + batch > state.perm.len() {
            // new pseudo-epoch; the remainder that cannot fill a batch is dropped
            state.shuffle.shuffle(&mut state.perm);
            state.cursor = 0;
        }
        let indices = state.perm[state.cursor..state.cursor + batch].to_vec();
        state.cursor += batch;
        let (noisy, clean) = stack_batch(&dataset.pairs, &indices)?;

        let record = match state.trainer.train_step(&noisy, &clean) {
            Ok(r) => r,
            Err(e) => {
                let abort_dir = opts.out.join("ckpt_abort");
                save_checkpoint(&abort_dir, &state)?;
                log.flush().ok();
                bail!(
                    "training aborted at step {}: {e}; state dumped to {}",
                    state.trainer.step,
                    abort_dir.display()
                );
            }
        };
        writeln!(
            log,
            "{}",
            serde_json::json!({
                "step": record.step,
                "k1": record.k1,
                "k2": record.k2,
                "k3": record.k3,
                "L_perc": record.perceptual,
                "L_sl1": record.smooth_l1,
                "L_adv_g": record.adv_g,
                "L_d": record.disc,
            })
        )?;
        last_record = Some(record);

        let done = state.trainer.step;
        if opts.checkpoint_interval > 0 && done % opts.checkpoint_interval == 0 && done < total {
            save_checkpoint(&opts.out.join(format!("ckpt_step_{done:06}")), &state)?;
        }
    }
    log.flush()?;

    let final_dir = opts.out.join("ckpt_final");
    save_checkpoint(&final_dir, &state)?;
    let hash = state_hash(&state.trainer.gen, &state.trainer.disc);

    let mut manifest = RunManifest::new(
        "train",
        serde_json::json!({
            "data": opts.data.display().to_string(),
            "scale": opts.scale.as_str(),
            "steps": total,
            "batch_size": batch,
            "lr": state.trainer.config.lr,
            "seed": opts.seed,
            "checkpoint_interval": opts.checkpoint_interval,
            "d_steps_per_g_step": state.trainer.config.d_steps_per_g_step,
            "weight_override": state.trainer.config.weight_override.map(|w| [w.k1, w.k2, w.k3]),
            "with_gc": state.trainer.gen.with_gc(),
            "resumed_from": opts.resume.as_ref().map(|p| p.display().to_string()),
        }),
        Some(opts.seed),
    );
    manifest.extractor_provenance = Some(state.extractor_provenance.clone());
    manifest.checkpoint_hash = Some(hash.clone());
    manifest.artifacts = vec![
        "ckpt_final".to_string(),
        "train_log.jsonl".to_string(),
    ];
    manifest.write(&opts.out)?;

    Ok(TrainSummary {
        steps_run: state.trainer.step,
        final_checkpoint: final_dir,
        log_path,
        checkpoint_hash: hash,
        last_record,
    })
}
