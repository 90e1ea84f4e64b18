//! pamdn: de-noising toolkit for photoacoustic microscopy images.
//!
//! Subcommands cover the whole pipeline: phantom generation, noisy
//! dataset synthesis, adversarial training, (tiled) inference, metric
//! evaluation, kernel self-checks, and inference timing. Every command
//! that produces artifacts writes a run manifest sufficient to replay
//! it; a `--config file.json` can supply any flag, with explicit
//! command-line values taking precedence.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use pamdn_core::losses::LossWeights;
use pamdn_core::model::Scale;
use pamdn_core::noise::{
    gen_phantom, NoiseLevel, PhantomKind, PhantomSpec, DEFAULT_DEPTH, DEFAULT_PULSE_SIGMA,
};
use pamdn_core::rng::derive_seed;
use pamdn_core::Tensor;

use pamdn::checkpoint::load_generator;
use pamdn::manifest::RunManifest;
use pamdn::par::par_map;
use pamdn::pgm::{read_pgm16, write_pgm16};
use pamdn::report::{evaluate, render_table, EvalOptions};
use pamdn::selfcheck::{gradcheck_suite, GRADCHECK_TOLERANCE};
use pamdn::synth::{list_pgm_files, synthesize, SynthOptions};
use pamdn::tile::denoise_image;
use pamdn::trainer::{run_training, TrainOptions};

#[derive(Parser)]
#[command(name = "pamdn", version, about = "De-noising toolkit for photoacoustic microscopy images")]
struct Cli {
    /// JSON file supplying defaults for the invoked command's flags
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate clean synthetic phantom images
    Phantom(PhantomArgs),
    /// Synthesize noisy/clean training pairs from clean images
    Synth(SynthArgs),
    /// Train the de-noising GAN on a synthesized dataset
    Train(TrainArgs),
    /// De-noise images with a trained checkpoint
    Denoise(DenoiseArgs),
    /// Evaluate predictions with PSNR/SSIM/SNR/CNR
    Eval(EvalArgs),
    /// Finite-difference check of every layer and both networks
    Gradcheck(GradcheckArgs),
    /// Time inference on a checkpoint
    Bench(BenchArgs),
}

fn main() {
    let cli = Cli::parse();
    let code = match load_config(cli.config.as_deref()).and_then(|cfg| run(cli.command, cfg)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

fn load_config(path: Option<&std::path::Path>) -> Result<Option<serde_json::Value>> {
    match path {
        None => Ok(None),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))?;
            Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?))
        }
    }
}

fn run(command: Command, file_cfg: Option<serde_json::Value>) -> Result<i32> {
    match command {
        Command::Phantom(args) => cmd_phantom(args.merged(&file_cfg)?),
        Command::Synth(args) => cmd_synth(args.merged(&file_cfg)?),
        Command::Train(args) => cmd_train(args.merged(&file_cfg)?),
        Command::Denoise(args) => cmd_denoise(args.merged(&file_cfg)?),
        Command::Eval(args) => cmd_eval(args.merged(&file_cfg)?),
        Command::Gradcheck(args) => cmd_gradcheck(args.merged(&file_cfg)?),
        Command::Bench(args) => cmd_bench(args.merged(&file_cfg)?),
    }
}

/// Optional field: command line, else config file, else absent.
fn merged_opt<T: Clone + for<'de> Deserialize<'de>>(
    cli: Option<T>,
    file: &Option<serde_json::Value>,
    key: &str,
) -> Result<Option<T>> {
    if cli.is_some() {
        return Ok(cli);
    }
    if let Some(cfg) = file {
        if let Some(raw) = cfg.get(key) {
            if raw.is_null() {
                return Ok(None);
            }
            return Ok(Some(
                serde_json::from_value(raw.clone()).with_context(|| format!("config key {key:?}"))?,
            ));
        }
    }
    Ok(None)
}

/// Merge order: command line beats config file beats built-in default.
fn merged_field<T: Clone + for<'de> Deserialize<'de>>(
    cli: Option<T>,
    file: &Option<serde_json::Value>,
    key: &str,
    default: T,
) -> Result<T> {
    if let Some(v) = cli {
        return Ok(v);
    }
    if let Some(cfg) = file {
        if let Some(raw) = cfg.get(key) {
            return serde_json::from_value(raw.clone())
                .with_context(|| format!("config key {key:?}"));
        }
    }
    Ok(default)
}

// ── phantom ─────────────────────────────────────────────────────────

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    count: Option<usize>,
    /// Height and width in pixels
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    size: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

struct PhantomCfg {
    kind: PhantomKind,
    count: usize,
    size: (usize, usize),
    seed: u64,
    out: PathBuf,
}

impl PhantomArgs {
    fn merged(self, file: &Option<serde_json::Value>) -> Result<PhantomCfg> {
        let kind_s: String = merged_field(self.kind, file, "kind", "veins".into())?;
        let size: Vec<usize> = merged_field(self.size, file, "size", vec![256, 256])?;
        if size.len() != 2 {
            bail!("--size takes exactly two values");
        }
        let out: Option<PathBuf> = merged_opt(self.out, file, "out")?;
        Ok(PhantomCfg {
            kind: PhantomKind::parse(&kind_s)?,
            count: merged_field(self.count, file, "count", 8)?,
            size: (size[0], size[1]),
            seed: merged_field(self.seed, file, "seed", 0)?,
            out: out.ok_or_else(|| anyhow::anyhow!("--out is required"))?,
        })
    }
}

fn cmd_phantom(cfg: PhantomCfg) -> Result<i32> {
    let (h, w) = cfg.size;
    let specs: Vec<PhantomSpec> = (0..cfg.count)
        .map(|i| {
            let seed = derive_seed(cfg.seed, i as u64);
            match cfg.kind {
                PhantomKind::Veins => PhantomSpec::veins(h, w, seed),
                PhantomKind::Vessels => PhantomSpec::vessels(h, w, seed),
            }
        })
        .collect();
    // validate before touching the filesystem
    for spec in &specs {
        spec.validate()?;
    }
    std::fs::create_dir_all(&cfg.out)?;
    let images = par_map(&specs, |_, spec| gen_phantom(spec));
    let mut artifacts = Vec::new();
    for (i, img) in images.into_iter().enumerate() {
        let name = format!("phantom_{i:04}.pgm");
        write_pgm16(&cfg.out.join(&name), &img?)?;
        artifacts.push(name);
    }
    let mut manifest = RunManifest::new(
        "phantom",
        serde_json::json!({
            "kind": cfg.kind.as_str(),
            "count": cfg.count,
            "size": [h, w],
            "seed": cfg.seed,
        }),
        Some(cfg.seed),
    );
    manifest.artifacts = artifacts;
    manifest.write(&cfg.out)?;
    println!("wrote {} {} phantoms to {}", cfg.count, cfg.kind.as_str(), cfg.out.display());
    Ok(0)
}

// ── synth ───────────────────────────────────────────────────────────

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    clean_dir: Option<PathBuf>,
    /// Comma-separated subset of low,mid,high
    #[arg(long)]
    levels: Option<String>,
    #[arg(long)]
    pairs_per_image: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    pulse_sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Debug: inject no noise at all
    #[arg(long)]
    zero_noise: bool,
}

impl SynthArgs {
    fn merged(self, file: &Option<serde_json::Value>) -> Result<SynthOptions> {
        let clean_dir: Option<PathBuf> = merged_opt(self.clean_dir, file, "clean_dir")?;
        let out: Option<PathBuf> = merged_opt(self.out, file, "out")?;
        let levels_s: String = merged_field(self.levels, file, "levels", "low,mid,high".into())?;
        let levels = levels_s
            .split(',')
            .filter(|s| !s.is_empty())
            .map(NoiseLevel::parse)
            .collect::<pamdn_core::Result<Vec<_>>>()?;
        let zero_noise = if self.zero_noise {
            true
        } else {
            merged_field(None, file, "zero_noise", false)?
        };
        Ok(SynthOptions {
            clean_dir: clean_dir.ok_or_else(|| anyhow::anyhow!("--clean-dir is required"))?,
            out: out.ok_or_else(|| anyhow::anyhow!("--out is required"))?,
            levels,
            pairs_per_image: merged_field(self.pairs_per_image, file, "pairs_per_image", 1)?,
            depth: merged_field(self.depth, file, "depth", DEFAULT_DEPTH)?,
            pulse_sigma: merged_field(self.pulse_sigma, file, "pulse_sigma", DEFAULT_PULSE_SIGMA)?,
            seed: merged_field(self.seed, file, "seed", 0)?,
            zero_noise,
        })
    }
}

fn cmd_synth(opts: SynthOptions) -> Result<i32> {
    let manifest = synthesize(&opts)?;
    let mut run = RunManifest::new(
        "synth",
        serde_json::json!({
            "clean_dir": opts.clean_dir.display().to_string(),
            "levels": opts.levels.iter().map(|l| l.as_str()).collect::<Vec<_>>(),
            "pairs_per_image": opts.pairs_per_image,
            "depth": opts.depth,
            "pulse_sigma": opts.pulse_sigma,
            "seed": opts.seed,
            "zero_noise": opts.zero_noise,
        }),
        Some(opts.seed),
    );
    run.artifacts = vec!["manifest.json".into()];
    run.write(&opts.out)?;
    println!("synthesized {} pairs into {}", manifest.rows.len(), opts.out.display());
    Ok(0)
}

// ── train ───────────────────────────────────────────────────────────

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    scale: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    #[arg(long)]
    d_steps: Option<u32>,
    /// Pin the loss weights to fixed k1,k2,k3 instead of the schedule
    #[arg(long, value_name = "K1,K2,K3")]
    fix_weights: Option<String>,
    /// Ablation: build the generator without its attention blocks
    #[arg(long)]
    no_gc: bool,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// External perceptual conv kernel (.tns, shape (out_c, 1, k, k))
    #[arg(long)]
    perceptual_weights: Option<PathBuf>,
}

impl TrainArgs {
    fn merged(self, file: &Option<serde_json::Value>) -> Result<TrainOptions> {
        let data: Option<PathBuf> = merged_opt(self.data, file, "data")?;
        let out: Option<PathBuf> = merged_opt(self.out, file, "out")?;
        let scale_s: String = merged_field(self.scale, file, "scale", "1/8".into())?;
        let fix: Option<String> = merged_opt(self.fix_weights, file, "fix_weights")?;
        let weight_override = match fix {
            None => None,
            Some(s) => {
                let parts: Vec<f64> = s
                    .split(',')
                    .map(|p| p.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .with_context(|| format!("parsing --fix-weights {s:?}"))?;
                if parts.len() != 3 {
                    bail!("--fix-weights needs exactly k1,k2,k3");
                }
                Some(LossWeights { k1: parts[0], k2: parts[1], k3: parts[2] })
            }
        };
        let with_gc = if self.no_gc {
            false
        } else {
            merged_field(None, file, "with_gc", true)?
        };
        Ok(TrainOptions {
            data: data.ok_or_else(|| anyhow::anyhow!("--data is required"))?,
            out: out.ok_or_else(|| anyhow::anyhow!("--out is required"))?,
            scale: Scale::parse(&scale_s)?,
            steps: merged_field(self.steps, file, "steps", 2000)?,
            batch_size: merged_field(self.batch, file, "batch", 8)?,
            lr: merged_field(self.lr, file, "lr", 1e-4)?,
            seed: merged_field(self.seed, file, "seed", 0)?,
            checkpoint_interval: merged_field(
                self.checkpoint_interval,
                file,
                "checkpoint_interval",
                500,
            )?,
            d_steps_per_g_step: merged_field(self.d_steps, file, "d_steps", 1)?,
            weight_override,
            with_gc,
            resume: merged_opt(self.resume, file, "resume")?,
            perceptual_weights: merged_opt(self.perceptual_weights, file, "perceptual_weights")?,
        })
    }
}

fn cmd_train(opts: TrainOptions) -> Result<i32> {
    let summary = run_training(&opts)?;
    println!(
        "trained {} steps; final checkpoint {} (hash {})",
        summary.steps_run,
        summary.final_checkpoint.display(),
        summary.checkpoint_hash
    );
    if let Some(last) = summary.last_record {
        println!(
            "final losses: perc {:.6} sl1 {:.6} adv {:.6}",
            last.perceptual, last.smooth_l1, last.adv_g
        );
    }
    Ok(0)
}

// ── denoise ─────────────────────────────────────────────────────────

#[derive(Args)]
struct DenoiseArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Input PGM file or directory of PGMs
    #[arg(long, value_name = "PATH")]
    r#in: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    tile: Option<usize>,
}

struct DenoiseCfg {
    checkpoint: PathBuf,
    input: PathBuf,
    out: PathBuf,
    tile: usize,
}

impl DenoiseArgs {
    fn merged(self, file: &Option<serde_json::Value>) -> Result<DenoiseCfg> {
        let checkpoint: Option<PathBuf> = merged_opt(self.checkpoint, file, "checkpoint")?;
        let input: Option<PathBuf> = merged_opt(self.r#in, file, "in")?;
        let out: Option<PathBuf> = merged_opt(self.out, file, "out")?;
        Ok(DenoiseCfg {
            checkpoint: checkpoint.ok_or_else(|| anyhow::anyhow!("--checkpoint is required"))?,
            input: input.ok_or_else(|| anyhow::anyhow!("--in is required"))?,
            out: out.ok_or_else(|| anyhow::anyhow!("--out is required"))?,
            tile: merged_field(self.tile, file, "tile", 256)?,
        })
    }
}

fn cmd_denoise(cfg: DenoiseCfg) -> Result<i32> {
    let (gen, hash) = load_generator(&cfg.checkpoint)?;
    let inputs: Vec<PathBuf> = if cfg.input.is_dir() {
        list_pgm_files(&cfg.input)?
    } else {
        vec![cfg.input.clone()]
    };
    if inputs.is_empty() {
        bail!("no .pgm inputs under {}", cfg.input.display());
    }
    std::fs::create_dir_all(&cfg.out)?;
    let outputs = par_map(&inputs, |_, path| -> Result<(String, Tensor)> {
        let img = read_pgm16(path)?;
        let out = denoise_image(&gen, &img, cfg.tile)?;
        Ok((path.file_name().unwrap().to_string_lossy().into_owned(), out))
    });
    let mut artifacts = Vec::new();
    for result in outputs {
        let (name, img) = result?;
        write_pgm16(&cfg.out.join(&name), &img)?;
        artifacts.push(name);
    }
    let mut manifest = RunManifest::new(
        "denoise",
        serde_json::json!({
            "checkpoint": cfg.checkpoint.display().to_string(),
            "in": cfg.input.display().to_string(),
            "tile": cfg.tile,
        }),
        None,
    );
    manifest.checkpoint_hash = Some(hash);
    manifest.artifacts = artifacts;
    manifest.write(&cfg.out)?;
    println!("de-noised {} images into {}", inputs.len(), cfg.out.display());
    Ok(0)
}

// ── eval ────────────────────────────────────────────────────────────

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    pred_dir: Option<PathBuf>,
    /// Manual RoiSet JSON; without it, boxes are placed automatically
    /// wherever clean references exist
    #[arg(long)]
    rois: Option<PathBuf>,
    #[arg(long)]
    group_by_level: bool,
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl EvalArgs {
    fn merged(self, file: &Option<serde_json::Value>) -> Result<EvalOptions> {
        let data: Option<PathBuf> = merged_opt(self.data, file, "data")?;
        let rois: Option<PathBuf> = merged_opt(self.rois, file, "rois")?;
        let group = if self.group_by_level {
            true
        } else {
            merged_field(None, file, "group_by_level", false)?
        };
        Ok(EvalOptions {
            data: data.ok_or_else(|| anyhow::anyhow!("--data is required"))?,
            checkpoint: merged_opt(self.checkpoint, file, "checkpoint")?,
            pred_dir: merged_opt(self.pred_dir, file, "pred_dir")?,
            auto_rois: rois.is_none(),
            rois,
            group_by_level: group,
            tile: merged_field(self.tile, file, "tile", 256)?,
            out: merged_opt(self.out, file, "out")?,
        })
    }
}

fn cmd_eval(opts: EvalOptions) -> Result<i32> {
    let report = evaluate(&opts)?;
    print!("{}", render_table(&report));
    Ok(0)
}

// ── gradcheck ───────────────────────────────────────────────────────

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    scale: Option<String>,
    #[arg(long)]
    size: Option<usize>,
    /// Finite-difference step
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

struct GradcheckCfg {
    scale: Scale,
    size: usize,
    step: f64,
    out: Option<PathBuf>,
}

impl GradcheckArgs {
    fn merged(self, file: &Option<serde_json::Value>) -> Result<GradcheckCfg> {
        let scale_s: String = merged_field(self.scale, file, "scale", "1/8".into())?;
        Ok(GradcheckCfg {
            scale: Scale::parse(&scale_s)?,
            size: merged_field(self.size, file, "size", 16)?,
            step: merged_field(self.step, file, "step", 1e-5)?,
            out: merged_opt(self.out, file, "out")?,
        })
    }
}

fn cmd_gradcheck(cfg: GradcheckCfg) -> Result<i32> {
    if cfg.size % 16 != 0 {
        bail!("--size must be a multiple of 16");
    }
    let results = gradcheck_suite(cfg.scale, cfg.size, cfg.step)?;
    let mut failed = 0;
    for r in &results {
        println!(
            "{:<22} {:>12.3e}  {}",
            r.name,
            r.max_rel_err,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if !r.passed() {
            failed += 1;
        }
    }
    println!(
        "{} / {} ops within {GRADCHECK_TOLERANCE:.0e}",
        results.len() - failed,
        results.len()
    );
    if let Some(out) = &cfg.out {
        std::fs::create_dir_all(out)?;
        let rows: Vec<serde_json::Value> = results
            .iter()
            .map(|r| {
                serde_json::json!({
                    "op": r.name,
                    "max_rel_err": r.max_rel_err,
                    "pass": r.passed(),
                })
            })
            .collect();
        std::fs::write(out.join("gradcheck.json"), serde_json::to_string_pretty(&rows)?)?;
        let mut manifest = RunManifest::new(
            "gradcheck",
            serde_json::json!({
                "scale": cfg.scale.as_str(),
                "size": cfg.size,
                "step": cfg.step,
            }),
            None,
        );
        manifest.artifacts = vec!["gradcheck.json".into()];
        manifest.write(out)?;
    }
    Ok(if failed == 0 { 0 } else { 1 })
}

// ── bench ───────────────────────────────────────────────────────────

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    repeat: Option<usize>,
}

struct BenchCfg {
    checkpoint: PathBuf,
    size: usize,
    repeat: usize,
}

impl BenchArgs {
    fn merged(self, file: &Option<serde_json::Value>) -> Result<BenchCfg> {
        let checkpoint: Option<PathBuf> = merged_opt(self.checkpoint, file, "checkpoint")?;
        Ok(BenchCfg {
            checkpoint: checkpoint.ok_or_else(|| anyhow::anyhow!("--checkpoint is required"))?,
            size: merged_field(self.size, file, "size", 256)?,
            repeat: merged_field(self.repeat, file, "repeat", 5)?,
        })
    }
}

fn cmd_bench(cfg: BenchCfg) -> Result<i32> {
    if cfg.repeat == 0 {
        bail!("--repeat must be positive");
    }
    let (gen, hash) = load_generator(&cfg.checkpoint)?;
    let mut rng = pamdn_core::rng::Rng::new(0);
    let img = Tensor::from_vec(
        &[cfg.size, cfg.size],
        (0..cfg.size * cfg.size).map(|_| rng.uniform()).collect(),
    )?;
    // warm-up pass outside the timings
    denoise_image(&gen, &img, cfg.size.max(256))?;
    let mut times = Vec::with_capacity(cfg.repeat);
    for i in 0..cfg.repeat {
        let t0 = Instant::now();
        denoise_image(&gen, &img, cfg.size.max(256))?;
        let dt = t0.elapsed().as_secs_f64();
        println!("run {:>3}: {:.4} s", i, dt);
        times.push(dt);
    }
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    println!(
        "median {:.4} s per {}x{} image (checkpoint {hash})",
        median, cfg.size, cfg.size
    );
    Ok(0)
}
