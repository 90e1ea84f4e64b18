//! Checkpoints: a directory of named .tns files (weights, running
//! statistics, Adam moments, frozen extractor) plus a JSON manifest
//! carrying the architecture, counters and RNG state. Loading is a
//! lossless round trip, so a resumed run continues the exact parameter
//! trajectory of an uninterrupted one.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pamdn_core::losses::{ExtractorStage, LossWeights, PerceptualExtractor};
use pamdn_core::model::{ConvParams, Discriminator, Generator, Scale};
use pamdn_core::optim::AdamState;
use pamdn_core::rng::Rng;
use pamdn_core::tensor::Tensor;
use pamdn_core::train::{GanTrainer, TrainerConfig};
use serde::{Deserialize, Serialize};

use crate::tns::{load_tensor, save_tensor};

pub const CHECKPOINT_MANIFEST_NAME: &str = "checkpoint.json";

/// Everything the training loop needs to continue: the models and
/// optimizer, plus the shuffle stream and its in-flight permutation.
pub struct TrainState {
    pub trainer: GanTrainer,
    pub shuffle: Rng,
    pub perm: Vec<usize>,
    pub cursor: usize,
    pub batch_size: usize,
    pub extractor_provenance: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct StageMeta {
    relu: bool,
    pool: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    scale: String,
    gen_seed: u64,
    disc_seed: u64,
    with_gc: bool,
    step: u64,
    total_steps: u64,
    lr: f64,
    d_steps_per_g_step: u32,
    weight_override: Option<[f64; 3]>,
    batch_size: usize,
    adam_g_t: u64,
    adam_d_t: u64,
    bn_updates: u64,
    extractor_provenance: String,
    extractor_stages: Vec<StageMeta>,
    shuffle_state: [String; 4],
    perm: Vec<u64>,
    cursor: u64,
}

/// Combined content hash of both models, for output provenance.
pub fn state_hash(gen: &Generator, disc: &Discriminator) -> String {
    format!("{:016x}{:016x}", gen.params_hash(), disc.params_hash())
}

pub fn save_checkpoint(dir: &Path, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let t = &state.trainer;

    for (name, tensor) in t.gen.named_params() {
        save_tensor(&dir.join(format!("g.{name}.tns")), tensor)?;
    }
    for (name, tensor) in t.disc.named_params() {
        save_tensor(&dir.join(format!("d.{name}.tns")), tensor)?;
    }
    for (name, tensor) in t.disc.named_buffers() {
        save_tensor(&dir.join(format!("d.{name}.tns")), &tensor)?;
    }
    for (name, tensor) in t.extractor.named_weights() {
        save_tensor(&dir.join(format!("pe.{name}.tns")), &tensor)?;
    }
    save_moments(dir, "adam_g", &t.gen.named_params(), &t.adam_g)?;
    save_moments(dir, "adam_d", &t.disc.named_params(), &t.adam_d)?;

    let bn_updates = t.disc.layers.first().map_or(0, |l| l.stats.updates);
    let manifest = CheckpointManifest {
        version: 1,
        scale: t.gen.scale.as_str().to_string(),
        gen_seed: t.gen.seed,
        disc_seed: t.disc.seed,
        with_gc: t.gen.with_gc(),
        step: t.step,
        total_steps: t.config.total_steps,
        lr: t.config.lr,
        d_steps_per_g_step: t.config.d_steps_per_g_step,
        weight_override: t.config.weight_override.map(|w| [w.k1, w.k2, w.k3]),
        batch_size: state.batch_size,
        adam_g_t: t.adam_g.t,
        adam_d_t: t.adam_d.t,
        bn_updates,
        extractor_provenance: state.extractor_provenance.clone(),
        extractor_stages: t
            .extractor
            .stages()
            .iter()
            .map(|s| StageMeta { relu: s.relu, pool: s.pool })
            .collect(),
        shuffle_state: state.shuffle.state().map(|w| format!("{w:016x}")),
        perm: state.perm.iter().map(|&i| i as u64).collect(),
        cursor: state.cursor as u64,
    };
    let path = dir.join(CHECKPOINT_MANIFEST_NAME);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn save_moments(
    dir: &Path,
    prefix: &str,
    params: &[(String, &Tensor)],
    adam: &AdamState,
) -> Result<()> {
    for (i, (name, _)) in params.iter().enumerate() {
        let m = Tensor::from_vec(&[adam.m[i].len()], adam.m[i].clone())?;
        let v = Tensor::from_vec(&[adam.v[i].len()], adam.v[i].clone())?;
        save_tensor(&dir.join(format!("{prefix}.{name}.m.tns")), &m)?;
        save_tensor(&dir.join(format!("{prefix}.{name}.v.tns")), &v)?;
    }
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(CHECKPOINT_MANIFEST_NAME);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Restore a full training state. When `expected_scale` is given, a
/// checkpoint built at a different scale is rejected up front.
pub fn load_checkpoint(dir: &Path, expected_scale: Option<Scale>) -> Result<TrainState> {
    let manifest = read_manifest(dir)?;
    let scale = Scale::parse(&manifest.scale)?;
    if let Some(expect) = expected_scale {
        if expect != scale {
            bail!(
                "checkpoint {} was trained at scale {} but scale {} was requested",
                dir.display(),
                scale.as_str(),
                expect.as_str()
            );
        }
    }

    let mut gen = Generator::build_custom(manifest.gen_seed, scale, manifest.with_gc)?;
    let gen_names = named(&gen.named_params());
    fill_params(dir, "g", &mut gen.params_mut(), &gen_names)?;
    let mut disc = Discriminator::build(manifest.disc_seed, scale)?;
    let disc_names = named(&disc.named_params());
    fill_params(dir, "d", &mut disc.params_mut(), &disc_names)?;

    let mut buffers = Vec::new();
    for (name, existing) in disc.named_buffers() {
        let t = load_tensor(&dir.join(format!("d.{name}.tns")))?;
        if t.shape() != existing.shape() {
            bail!(
                "checkpoint buffer {name} has shape {:?}, architecture expects {:?}",
                t.shape(),
                existing.shape()
            );
        }
        buffers.push((name, t));
    }
    disc.load_buffers(&buffers, manifest.bn_updates)?;

    let mut stages = Vec::new();
    for (i, meta) in manifest.extractor_stages.iter().enumerate() {
        let weight = load_tensor(&dir.join(format!("pe.stage{i}.weight.tns")))?;
        let bias = load_tensor(&dir.join(format!("pe.stage{i}.bias.tns")))?;
        stages.push(ExtractorStage {
            conv: ConvParams { weight, bias },
            relu: meta.relu,
            pool: meta.pool,
        });
    }
    let extractor = PerceptualExtractor::from_stages(stages)?;

    let mut adam_g = AdamState::for_params(&gen.named_params(), manifest.lr);
    adam_g.t = manifest.adam_g_t;
    fill_moments(dir, "adam_g", &named(&gen.named_params()), &mut adam_g)?;
    let mut adam_d = AdamState::for_params(&disc.named_params(), manifest.lr);
    adam_d.t = manifest.adam_d_t;
    fill_moments(dir, "adam_d", &named(&disc.named_params()), &mut adam_d)?;

    let config = TrainerConfig {
        lr: manifest.lr,
        total_steps: manifest.total_steps,
        d_steps_per_g_step: manifest.d_steps_per_g_step,
        weight_override: manifest
            .weight_override
            .map(|[k1, k2, k3]| LossWeights { k1, k2, k3 }),
    };
    let trainer = GanTrainer {
        gen,
        disc,
        adam_g,
        adam_d,
        extractor,
        step: manifest.step,
        config,
    };

    let mut shuffle_state = [0u64; 4];
    for (w, hex) in shuffle_state.iter_mut().zip(&manifest.shuffle_state) {
        *w = u64::from_str_radix(hex, 16)
            .with_context(|| format!("bad shuffle state word {hex:?}"))?;
    }

    Ok(TrainState {
        trainer,
        shuffle: Rng::from_state(shuffle_state),
        perm: manifest.perm.iter().map(|&i| i as usize).collect(),
        cursor: manifest.cursor as usize,
        batch_size: manifest.batch_size,
        extractor_provenance: manifest.extractor_provenance,
    })
}

/// Load only the generator (plus provenance hash), for inference.
pub fn load_generator(dir: &Path) -> Result<(Generator, String)> {
    let manifest = read_manifest(dir)?;
    let scale = Scale::parse(&manifest.scale)?;
    let mut gen = Generator::build_custom(manifest.gen_seed, scale, manifest.with_gc)?;
    let gen_names = named(&gen.named_params());
    fill_params(dir, "g", &mut gen.params_mut(), &gen_names)?;
    let hash = format!("{:016x}", gen.params_hash());
    Ok((gen, hash))
}

fn named(params: &[(String, &Tensor)]) -> Vec<String> {
    params.iter().map(|(n, _)| n.clone()).collect()
}

fn fill_params(
    dir: &Path,
    prefix: &str,
    params: &mut [&mut Tensor],
    names: &[String],
) -> Result<()> {
    for (p, name) in params.iter_mut().zip(names) {
        let path = dir.join(format!("{prefix}.{name}.tns"));
        let t = load_tensor(&path)?;
        if t.shape() != p.shape() {
            bail!(
                "{} has shape {:?} but the declared architecture expects {:?}; \
                 the checkpoint does not match its manifest scale",
                path.display(),
                t.shape(),
                p.shape()
            );
        }
        p.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

fn fill_moments(dir: &Path, prefix: &str, names: &[String], adam: &mut AdamState) -> Result<()> {
    for (i, name) in names.iter().enumerate() {
        let m = load_tensor(&dir.join(format!("{prefix}.{name}.m.tns")))?;
        let v = load_tensor(&dir.join(format!("{prefix}.{name}.v.tns")))?;
        if m.numel() != adam.m[i].len() || v.numel() != adam.v[i].len() {
            bail!("Adam moment {prefix}.{name} does not match the parameter extent");
        }
        adam.m[i].copy_from_slice(m.data());
        adam.v[i].copy_from_slice(v.data());
    }
    Ok(())
}

/// Fresh training state for a new run.
pub fn fresh_state(
    gen: Generator,
    disc: Discriminator,
    extractor: PerceptualExtractor,
    extractor_provenance: String,
    config: TrainerConfig,
    seed: u64,
    dataset_len: usize,
    batch_size: usize,
) -> Result<TrainState> {
    let trainer = GanTrainer::new(gen, disc, extractor, config)?;
    let mut shuffle = Rng::substream(seed, 0x53485546); // shuffle stream
    let mut perm: Vec<usize> = (0..dataset_len).collect();
    shuffle.shuffle(&mut perm);
    Ok(TrainState {
        trainer,
        shuffle,
        perm,
        cursor: 0,
        batch_size,
        extractor_provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn tempdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("pamdn-ckpt-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn toy_state() -> TrainState {
        fresh_state(
            Generator::build(5, Scale::Eighth).unwrap(),
            Discriminator::build(6, Scale::Eighth).unwrap(),
            PerceptualExtractor::seeded(7),
            "seeded:7".into(),
            TrainerConfig { total_steps: 50, ..TrainerConfig::default() },
            11,
            12,
            4,
        )
        .unwrap()
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempdir("roundtrip");
        let mut state = toy_state();
        // advance so moments, stats and stream are non-trivial
        let mut rng = Rng::new(1);
        let mk = |rng: &mut Rng| {
            Tensor::from_vec(&[2, 1, 16, 16], (0..512).map(|_| rng.uniform()).collect()).unwrap()
        };
        let (noisy, clean) = (mk(&mut rng), mk(&mut rng));
        for _ in 0..2 {
            state.trainer.train_step(&noisy, &clean).unwrap();
        }
        state.shuffle.next_u64();
        state.cursor = 8;

        save_checkpoint(&dir, &state).unwrap();
        let loaded = load_checkpoint(&dir, Some(Scale::Eighth)).unwrap();

        assert_eq!(loaded.trainer.gen.params_hash(), state.trainer.gen.params_hash());
        assert_eq!(loaded.trainer.disc.params_hash(), state.trainer.disc.params_hash());
        assert_eq!(loaded.trainer.extractor.params_hash(), state.trainer.extractor.params_hash());
        assert_eq!(loaded.trainer.step, state.trainer.step);
        assert_eq!(loaded.trainer.adam_g, state.trainer.adam_g);
        assert_eq!(loaded.trainer.adam_d, state.trainer.adam_d);
        assert_eq!(loaded.trainer.disc.layers[0].stats, state.trainer.disc.layers[0].stats);
        assert_eq!(loaded.shuffle.state(), state.shuffle.state());
        assert_eq!(loaded.perm, state.perm);
        assert_eq!(loaded.cursor, state.cursor);
        assert_eq!(loaded.batch_size, state.batch_size);
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn scale_mismatch_is_an_explicit_error() {
        let dir = tempdir("scale");
        let state = toy_state();
        save_checkpoint(&dir, &state).unwrap();
        let err = load_checkpoint(&dir, Some(Scale::Quarter)).err().expect("load must fail");
        assert!(format!("{err:#}").contains("scale"), "{err:#}");
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn corrupted_weight_file_names_itself() {
        let dir = tempdir("corrupt");
        let state = toy_state();
        save_checkpoint(&dir, &state).unwrap();
        let victim = dir.join("g.head.weight.tns");
        let mut bytes = std::fs::read(&victim).unwrap();
        bytes[0] = b'X';
        std::fs::write(&victim, bytes).unwrap();
        let err = format!("{:#}", load_checkpoint(&dir, None).err().expect("load must fail"));
        assert!(err.contains("g.head.weight.tns"), "{err}");
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn step_counter_is_recorded() {
        let dir = tempdir("stepcount");
        let mut state = toy_state();
        state.trainer.step = 17;
        save_checkpoint(&dir, &state).unwrap();
        let loaded = load_checkpoint(&dir, None).unwrap();
        assert_eq!(loaded.trainer.step, 17);
        std::fs::remove_dir_all(dir).ok();
    }
}
