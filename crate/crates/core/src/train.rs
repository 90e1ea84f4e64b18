//! Adversarial training: alternating discriminator and generator Adam
//! updates with the scheduled composite loss.
//!
//! One `train_step` runs the discriminator phase first (real clean batch
//! against detached generator output, repeated `d_steps_per_g_step`
//! times), then the generator phase, where the discriminator is bound
//! frozen so adversarial gradient flows through it into the generator
//! without touching its weights. Everything downstream of a fixed seed
//! is deterministic.

use alloc::format;

use crate::error::{Error, Result};
use crate::losses::{
    combined_loss, discriminator_loss, schedule_weights, LossWeights, PerceptualExtractor,
};
use crate::model::{Discriminator, Generator};
use crate::optim::AdamState;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub lr: f64,
    pub total_steps: u64,
    pub d_steps_per_g_step: u32,
    /// Pins (k1, k2, k3) instead of following the schedule; used by the
    /// overfit oracle and ablation runs.
    pub weight_override: Option<LossWeights>,
}

impl Default for TrainerConfig {
    fn default() -> TrainerConfig {
        TrainerConfig {
            lr: 1e-4,
            total_steps: 2000,
            d_steps_per_g_step: 1,
            weight_override: None,
        }
    }
}

/// Scalar loss components of one step, for the JSONL training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub perceptual: f64,
    pub smooth_l1: f64,
    pub adv_g: f64,
    pub disc: Option<f64>,
}

pub struct GanTrainer {
    pub gen: Generator,
    pub disc: Discriminator,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
    pub extractor: PerceptualExtractor,
    pub step: u64,
    pub config: TrainerConfig,
}

impl GanTrainer {
    pub fn new(
        gen: Generator,
        disc: Discriminator,
        extractor: PerceptualExtractor,
        config: TrainerConfig,
    ) -> Result<GanTrainer> {
        if gen.scale != disc.scale {
            return Err(Error::Config(format!(
                "generator scale {} and discriminator scale {} disagree",
                gen.scale.as_str(),
                disc.scale.as_str()
            )));
        }
        if config.total_steps == 0 {
            return Err(Error::Range("training needs total_steps > 0".into()));
        }
        let adam_g = AdamState::for_params(&gen.named_params(), config.lr);
        let adam_d = AdamState::for_params(&disc.named_params(), config.lr);
        Ok(GanTrainer { gen, disc, adam_g, adam_d, extractor, step: 0, config })
    }

    /// Loss weights in effect at a step: the override if pinned, the
    /// paper schedule otherwise. Steps run 0..total_steps, so the
    /// schedule is stretched over total_steps - 1 and the last executed
    /// step lands exactly on the published endpoint (1, 0, 1e-3).
    pub fn weights_at(&self, step: u64) -> Result<LossWeights> {
        match self.config.weight_override {
            Some(w) => Ok(w),
            None => {
                let span = self.config.total_steps.saturating_sub(1).max(1);
                schedule_weights(step.min(span), span)
            }
        }
    }

    /// One alternating GAN step over a (noisy, clean) batch pair.
    pub fn train_step(&mut self, noisy: &Tensor, clean: &Tensor) -> Result<LossRecord> {
        if noisy.shape() != clean.shape() {
            return Err(Error::Dim(format!(
                "batch shapes disagree: noisy {:?} vs clean {:?}",
                noisy.shape(),
                clean.shape()
            )));
        }
        let w = self.weights_at(self.step)?;

        // discriminator phase: real against detached fakes
        let mut disc_loss = None;
        for _ in 0..self.config.d_steps_per_g_step {
            let fake = self.gen.infer(noisy)?;
            let mut tape = Tape::new();
            let dids = self.disc.bind(&mut tape, true);
            let real_id = tape.constant(clean.clone());
            let fake_id = tape.constant(fake);
            let s_real = self.disc.forward(&mut tape, &dids, real_id, true)?;
            let s_fake = self.disc.forward(&mut tape, &dids, fake_id, true)?;
            let ld = discriminator_loss(&mut tape, s_real, s_fake)?;
            let ld_val = tape.value(ld).item();
            if !ld_val.is_finite() {
                return Err(Error::NonFinite(format!(
                    "discriminator loss {ld_val} at step {}",
                    self.step
                )));
            }
            tape.backward(ld)?;
            let ids = dids.collect();
            let grads: alloc::vec::Vec<&[f64]> = ids
                .iter()
                .map(|id| tape.grad(*id).expect("bound discriminator param has a grad"))
                .collect();
            self.adam_d.step(&mut self.disc.params_mut(), &grads)?;
            disc_loss = Some(ld_val);
        }

        // generator phase: the discriminator participates frozen, and
        // scores through its running statistics once those exist, so the
        // generator's adversarial signal cannot exploit fake-batch
        // normalization
        let mut tape = Tape::new();
        let gids = self.gen.bind(&mut tape, true);
        let x = tape.constant(noisy.clone());
        let denoised = self.gen.forward(&mut tape, &gids, x)?;
        let dids = self.disc.bind(&mut tape, false);
        let d_training = self.disc.layers.first().is_none_or(|l| l.stats.updates == 0);
        let scores = self.disc.forward(&mut tape, &dids, denoised, d_training)?;
        let target = tape.constant(clean.clone());
        let combined = combined_loss(&mut tape, denoised, target, scores, &w, &self.extractor)?;
        let total = tape.value(combined.total).item();
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "generator loss {total} at step {}",
                self.step
            )));
        }
        tape.backward(combined.total)?;
        let ids = gids.collect();
        let grads: alloc::vec::Vec<&[f64]> = ids
            .iter()
            .map(|id| tape.grad(*id).expect("bound generator param has a grad"))
            .collect();
        self.adam_g.step(&mut self.gen.params_mut(), &grads)?;

        let record = LossRecord {
            step: self.step,
            k1: w.k1,
            k2: w.k2,
            k3: w.k3,
            perceptual: combined.perceptual,
            smooth_l1: combined.smooth_l1,
            adv_g: combined.adversarial,
            disc: disc_loss,
        };
        self.step += 1;
        Ok(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Scale;
    use crate::rng::Rng;
    use alloc::vec::Vec;

    fn small_trainer(seed: u64, config: TrainerConfig) -> GanTrainer {
        GanTrainer::new(
            Generator::build(seed, Scale::Eighth).unwrap(),
            Discriminator::build(seed + 1, Scale::Eighth).unwrap(),
            PerceptualExtractor::seeded(seed + 2),
            config,
        )
        .unwrap()
    }

    fn batch(seed: u64, n: usize, hw: usize) -> (Tensor, Tensor) {
        let mut rng = Rng::new(seed);
        let count = n * hw * hw;
        let noisy =
            Tensor::from_vec(&[n, 1, hw, hw], (0..count).map(|_| rng.uniform()).collect()).unwrap();
        let clean =
            Tensor::from_vec(&[n, 1, hw, hw], (0..count).map(|_| rng.uniform()).collect()).unwrap();
        (noisy, clean)
    }

    #[test]
    fn training_is_bit_deterministic() {
        let cfg = TrainerConfig { total_steps: 10, ..TrainerConfig::default() };
        let (noisy, clean) = batch(1, 2, 32);
        let run = || {
            let mut t = small_trainer(40, cfg.clone());
            let mut records = Vec::new();
            for _ in 0..3 {
                records.push(t.train_step(&noisy, &clean).unwrap());
            }
            (t.gen.params_hash(), t.disc.params_hash(), records)
        };
        let (g1, d1, r1) = run();
        let (g2, d2, r2) = run();
        assert_eq!(g1, g2);
        assert_eq!(d1, d2);
        assert_eq!(r1, r2);
    }

    #[test]
    fn zero_d_steps_leave_discriminator_untouched() {
        let cfg = TrainerConfig {
            total_steps: 10,
            d_steps_per_g_step: 0,
            ..TrainerConfig::default()
        };
        let mut t = small_trainer(41, cfg);
        let d_before = t.disc.params_hash();
        let g_before = t.gen.params_hash();
        let (noisy, clean) = batch(2, 2, 32);
        let rec = t.train_step(&noisy, &clean).unwrap();
        assert_eq!(t.disc.params_hash(), d_before);
        assert_ne!(t.gen.params_hash(), g_before);
        assert!(rec.disc.is_none());
    }

    #[test]
    fn schedule_weights_are_logged_exactly() {
        let cfg = TrainerConfig { total_steps: 4, ..TrainerConfig::default() };
        let mut t = small_trainer(42, cfg);
        let (noisy, clean) = batch(3, 2, 32);
        let mut last = None;
        for expect_step in 0..4u64 {
            let rec = t.train_step(&noisy, &clean).unwrap();
            let w = schedule_weights(expect_step, 3).unwrap();
            assert_eq!(rec.step, expect_step);
            assert_eq!((rec.k1, rec.k2, rec.k3), (w.k1, w.k2, w.k3));
            last = Some(rec);
        }
        // the first and last executed steps sit exactly on the published
        // schedule endpoints
        let last = last.unwrap();
        assert_eq!((last.k1, last.k2, last.k3), (1.0, 0.0, 1e-3));
    }

    #[test]
    fn overfit_one_batch_reduces_smooth_l1() {
        // pixel loss only, discriminator frozen
        let cfg = TrainerConfig {
            total_steps: 100,
            d_steps_per_g_step: 0,
            weight_override: Some(LossWeights { k1: 0.0, k2: 1.0, k3: 0.0 }),
            lr: 1e-4,
        };
        let mut t = small_trainer(43, cfg);
        let clean = crate::noise::gen_phantom(&crate::noise::PhantomSpec::veins(32, 32, 9))
            .unwrap();
        let mut noisy4 = Vec::new();
        let mut clean4 = Vec::new();
        for _ in 0..2 {
            noisy4.extend_from_slice(clean.data());
            clean4.extend_from_slice(clean.data());
        }
        let mut rng = Rng::new(10);
        noisy4.iter_mut().for_each(|v| *v = (*v + 0.1 * rng.normal()).clamp(0.0, 1.0));
        let noisy = Tensor::from_vec(&[2, 1, 32, 32], noisy4).unwrap();
        let clean = Tensor::from_vec(&[2, 1, 32, 32], clean4).unwrap();

        let first = t.train_step(&noisy, &clean).unwrap().smooth_l1;
        let mut last = first;
        for _ in 0..49 {
            last = t.train_step(&noisy, &clean).unwrap().smooth_l1;
        }
        assert!(last < first, "smooth-L1 did not fall: {first} -> {last}");
    }

    #[test]
    fn extractor_stays_frozen_through_training() {
        let cfg = TrainerConfig { total_steps: 10, ..TrainerConfig::default() };
        let mut t = small_trainer(44, cfg);
        let hash = t.extractor.params_hash();
        let (noisy, clean) = batch(5, 2, 32);
        for _ in 0..2 {
            t.train_step(&noisy, &clean).unwrap();
        }
        assert_eq!(t.extractor.params_hash(), hash);
    }

    #[test]
    fn nan_weights_abort_the_step() {
        let cfg = TrainerConfig { total_steps: 10, ..TrainerConfig::default() };
        let mut t = small_trainer(45, cfg);
        t.gen.head.bias.data_mut()[0] = f64::NAN;
        let (noisy, clean) = batch(6, 2, 32);
        assert!(matches!(t.train_step(&noisy, &clean), Err(Error::NonFinite(_))));
    }

    #[test]
    fn mismatched_scales_are_rejected() {
        let err = GanTrainer::new(
            Generator::build(1, Scale::Eighth).unwrap(),
            Discriminator::build(2, Scale::Quarter).unwrap(),
            PerceptualExtractor::seeded(3),
            TrainerConfig::default(),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
