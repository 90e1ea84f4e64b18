//! The composite generator loss and its schedule: perceptual distance in
//! a frozen feature space, smooth-L1 pixel distance, and the adversarial
//! term, blended as k1*L_perc + k2*L_sl1 + k3*L_gan with the weights
//! walking from pixel-dominated to perception-dominated over training.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::ConvParams;
use crate::rng::Rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// The (k1, k2, k3) trade-off triple at one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
}

/// Linear interpolation between the published endpoints: k2 starts at
/// 1.0 and decays to 0 while k1 and k3 rise from 0 to 1.0 and 1e-3.
pub fn schedule_weights(step: u64, total_steps: u64) -> Result<LossWeights> {
    if total_steps == 0 {
        return Err(Error::Range("schedule needs total_steps > 0".into()));
    }
    if step > total_steps {
        return Err(Error::Range(format!(
            "schedule step {step} exceeds total_steps {total_steps}"
        )));
    }
    let t = step as f64 / total_steps as f64;
    Ok(LossWeights { k1: t, k2: 1.0 - t, k3: 1e-3 * t })
}

// ── Frozen perceptual feature extractor ─────────────────────────────

/// One stage: a convolution, optionally ReLU, optionally 2x2 max-pool.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorStage {
    pub conv: ConvParams,
    pub relu: bool,
    pub pool: bool,
}

/// A fixed (never trained) convolutional stack standing in for the
/// pre-trained feature network of the perceptual loss. Weights come from
/// a seeded init or an external file; either way they are immutable for
/// the life of the run and hash-checked by the trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualExtractor {
    stages: Vec<ExtractorStage>,
}

impl PerceptualExtractor {
    /// The default stack: one 3x3 conv to 16 channels with ReLU and a
    /// single 2x pooling stage, so features live at H/2 x W/2 x 16. One
    /// pooling keeps the feature distance tight on fine structure.
    pub fn seeded(seed: u64) -> PerceptualExtractor {
        let mut rng = Rng::substream(seed, 0x504552); // perceptual stream
        let stages = alloc::vec![ExtractorStage {
            conv: ConvParams::he_conv(&mut rng, 16, 1, 3, 3),
            relu: true,
            pool: true,
        }];
        PerceptualExtractor { stages }
    }

    pub fn from_stages(stages: Vec<ExtractorStage>) -> Result<PerceptualExtractor> {
        if stages.is_empty() {
            return Err(Error::Config("perceptual extractor needs at least one stage".into()));
        }
        let mut in_c = 1;
        for (i, st) in stages.iter().enumerate() {
            let ws = st.conv.weight.shape();
            if ws.len() != 4 || ws[1] != in_c {
                return Err(Error::Config(format!(
                    "extractor stage {i} expects {in_c} input channels, weight is {ws:?}"
                )));
            }
            if ws[2] % 2 != 1 || ws[3] % 2 != 1 {
                return Err(Error::Config(format!(
                    "extractor stage {i} kernel {}x{} must be odd for same padding",
                    ws[2], ws[3]
                )));
            }
            in_c = ws[0];
        }
        Ok(PerceptualExtractor { stages })
    }

    pub fn stages(&self) -> &[ExtractorStage] {
        &self.stages
    }

    /// Run the frozen stack; gradients flow through to the input but the
    /// weights are bound as constants.
    pub fn features(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let mut cur = x;
        for st in &self.stages {
            let ids = st.conv.bind(tape, false);
            let pad = st.conv.weight.shape()[2] / 2;
            cur = tape.conv2d(cur, ids.w, ids.b, 1, pad)?;
            if st.relu {
                cur = tape.relu(cur);
            }
            if st.pool {
                cur = tape.maxpool2d(cur)?;
            }
        }
        Ok(cur)
    }

    pub fn named_weights(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, st) in self.stages.iter().enumerate() {
            out.push((format!("stage{i}.weight"), st.conv.weight.clone()));
            out.push((format!("stage{i}.bias"), st.conv.bias.clone()));
        }
        out
    }

    pub fn params_hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (name, t) in self.named_weights() {
            for &b in name.as_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
            h ^= t.content_hash();
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        h
    }
}

// ── Loss terms ──────────────────────────────────────────────────────

/// Mean squared distance between frozen features of the two images,
/// normalized by the feature extent.
pub fn perceptual_loss(
    tape: &mut Tape,
    denoised: TensorId,
    clean: TensorId,
    ext: &PerceptualExtractor,
) -> Result<TensorId> {
    if tape.value(denoised).shape() != tape.value(clean).shape() {
        return Err(Error::Dim(format!(
            "perceptual loss shapes disagree: {:?} vs {:?}",
            tape.value(denoised).shape(),
            tape.value(clean).shape()
        )));
    }
    let fd = ext.features(tape, denoised)?;
    let fc = ext.features(tape, clean)?;
    tape.mse_mean(fd, fc)
}

/// Mean smooth-L1 pixel distance.
pub fn smooth_l1_loss(tape: &mut Tape, denoised: TensorId, clean: TensorId) -> Result<TensorId> {
    tape.smooth_l1_mean(denoised, clean)
}

/// Sum over the batch of -log D(G(I_N)); a batch sum, not a mean.
pub fn generator_adv_loss(tape: &mut Tape, d_scores: TensorId) -> TensorId {
    tape.neg_log_sum(d_scores)
}

/// Binary cross-entropy for the discriminator: -sum log(real) - sum log(1 - fake).
pub fn discriminator_loss(
    tape: &mut Tape,
    real_scores: TensorId,
    fake_scores: TensorId,
) -> Result<TensorId> {
    let lr = tape.neg_log_sum(real_scores);
    let lf = tape.neg_log_one_minus_sum(fake_scores);
    tape.add(lr, lf)
}

/// The combined loss plus the detached component values for logging.
pub struct CombinedLoss {
    pub total: TensorId,
    pub perceptual: f64,
    pub smooth_l1: f64,
    pub adversarial: f64,
}

pub fn combined_loss(
    tape: &mut Tape,
    denoised: TensorId,
    clean: TensorId,
    d_scores: TensorId,
    w: &LossWeights,
    ext: &PerceptualExtractor,
) -> Result<CombinedLoss> {
    let lp = perceptual_loss(tape, denoised, clean, ext)?;
    let ls = smooth_l1_loss(tape, denoised, clean)?;
    let la = generator_adv_loss(tape, d_scores);
    let perceptual = tape.value(lp).item();
    let smooth_l1 = tape.value(ls).item();
    let adversarial = tape.value(la).item();
    let t1 = tape.scale(lp, w.k1);
    let t2 = tape.scale(ls, w.k2);
    let t3 = tape.scale(la, w.k3);
    let t12 = tape.add(t1, t2)?;
    let total = tape.add(t12, t3)?;
    Ok(CombinedLoss { total, perceptual, smooth_l1, adversarial })
}
