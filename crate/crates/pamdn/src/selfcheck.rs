//! The kernel self-check behind `pamdn gradcheck`: every differentiable
//! layer type, the loss terms, and both full networks are probed against
//! central differences. Each op reports one worst-case relative error.

use anyhow::Result;
use pamdn_core::gradcheck::grad_check;
use pamdn_core::losses::{
    combined_loss, discriminator_loss, generator_adv_loss, perceptual_loss, smooth_l1_loss,
    LossWeights, PerceptualExtractor,
};
use pamdn_core::model::{Discriminator, Generator, Scale, LRELU_ALPHA, NORM_EPS};
use pamdn_core::rng::Rng;
use pamdn_core::tape::{BnStats, Tape, TensorId};
use pamdn_core::Tensor;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOLERANCE
    }
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = Rng::new(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.range(lo, hi)).collect()).unwrap()
}

fn weighted_sum(tape: &mut Tape, y: TensorId, seed: u64) -> pamdn_core::Result<TensorId> {
    let shape = tape.value(y).shape().to_vec();
    let r = tape.constant(random(&shape, seed, -1.0, 1.0));
    let m = tape.mul(y, r)?;
    Ok(tape.sum_all(m))
}

/// Run the whole suite. `size` is the spatial extent fed to the full
/// networks; `h` is the finite-difference step.
pub fn gradcheck_suite(scale: Scale, size: usize, h: f64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut push = |name: &'static str, errs: Vec<f64>| {
        let max = errs.into_iter().fold(0.0f64, f64::max);
        out.push(CheckResult { name, max_rel_err: max });
    };

    // conv2d: input, weight and bias paths, plus the strided variant
    {
        let x0 = random(&[2, 3, 8, 8], 1, -1.0, 1.0);
        let w0 = random(&[4, 3, 3, 3], 2, -0.5, 0.5);
        let b0 = random(&[4], 3, -0.2, 0.2);
        let e1 = grad_check(
            |t, x| {
                let w = t.constant(w0.clone());
                let b = t.constant(b0.clone());
                let y = t.conv2d(x, w, b, 1, 1)?;
                weighted_sum(t, y, 4)
            },
            &x0,
            h,
        )?;
        let e2 = grad_check(
            |t, w| {
                let x = t.constant(x0.clone());
                let b = t.constant(b0.clone());
                let y = t.conv2d(x, w, b, 1, 1)?;
                weighted_sum(t, y, 5)
            },
            &w0,
            h,
        )?;
        let e3 = grad_check(
            |t, b| {
                let x = t.constant(x0.clone());
                let w = t.constant(w0.clone());
                let y = t.conv2d(x, w, b, 1, 1)?;
                weighted_sum(t, y, 6)
            },
            &b0,
            h,
        )?;
        let xs = random(&[1, 2, 8, 8], 7, -1.0, 1.0);
        let e4 = grad_check(
            |t, x| {
                let w = t.constant(random(&[3, 2, 3, 3], 8, -0.5, 0.5));
                let b = t.constant(random(&[3], 9, -0.2, 0.2));
                let y = t.conv2d_padded(x, w, b, 2, [0, 1, 0, 1])?;
                weighted_sum(t, y, 10)
            },
            &xs,
            h,
        )?;
        push("conv2d", vec![e1, e2, e3, e4]);
    }

    // conv2d_transpose
    {
        let x0 = random(&[2, 3, 3, 3], 11, -1.0, 1.0);
        let w0 = random(&[3, 4, 2, 2], 12, -0.5, 0.5);
        let b0 = random(&[4], 13, -0.2, 0.2);
        let e1 = grad_check(
            |t, x| {
                let w = t.constant(w0.clone());
                let b = t.constant(b0.clone());
                let y = t.conv2d_transpose(x, w, b, 2)?;
                weighted_sum(t, y, 14)
            },
            &x0,
            h,
        )?;
        let e2 = grad_check(
            |t, w| {
                let x = t.constant(x0.clone());
                let b = t.constant(b0.clone());
                let y = t.conv2d_transpose(x, w, b, 2)?;
                weighted_sum(t, y, 15)
            },
            &w0,
            h,
        )?;
        push("conv2d_transpose", vec![e1, e2]);
    }

    {
        let e = grad_check(
            |t, x| {
                let y = t.maxpool2d(x)?;
                weighted_sum(t, y, 16)
            },
            &random(&[2, 2, 4, 4], 17, -1.0, 1.0),
            h,
        )?;
        push("maxpool2d", vec![e]);
    }

    // normalizations, all three parameter paths each
    {
        let g3 = random(&[3], 20, 0.5, 1.5);
        let b3 = random(&[3], 21, -0.5, 0.5);
        let x0 = random(&[2, 3, 4, 4], 22, -1.5, 1.5);
        let e1 = grad_check(
            |t, x| {
                let g = t.constant(g3.clone());
                let b = t.constant(b3.clone());
                let y = t.instance_norm(x, g, b, NORM_EPS)?;
                weighted_sum(t, y, 23)
            },
            &x0,
            h,
        )?;
        let e2 = grad_check(
            |t, g| {
                let x = t.constant(x0.clone());
                let b = t.constant(b3.clone());
                let y = t.instance_norm(x, g, b, NORM_EPS)?;
                weighted_sum(t, y, 24)
            },
            &g3,
            h,
        )?;
        let e3 = grad_check(
            |t, b| {
                let x = t.constant(x0.clone());
                let g = t.constant(g3.clone());
                let y = t.instance_norm(x, g, b, NORM_EPS)?;
                weighted_sum(t, y, 25)
            },
            &b3,
            h,
        )?;
        push("instance_norm", vec![e1, e2, e3]);

        let e1 = grad_check(
            |t, x| {
                let g = t.constant(g3.clone());
                let b = t.constant(b3.clone());
                let mut stats = BnStats::new(3);
                let y = t.batch_norm(x, g, b, &mut stats, 0.1, NORM_EPS, true)?;
                weighted_sum(t, y, 26)
            },
            &x0,
            h,
        )?;
        let e2 = grad_check(
            |t, g| {
                let x = t.constant(x0.clone());
                let b = t.constant(b3.clone());
                let mut stats = BnStats::new(3);
                let y = t.batch_norm(x, g, b, &mut stats, 0.1, NORM_EPS, true)?;
                weighted_sum(t, y, 27)
            },
            &g3,
            h,
        )?;
        push("batch_norm", vec![e1, e2]);

        let gk = random(&[8], 28, 0.5, 1.5);
        let bk = random(&[8], 29, -0.5, 0.5);
        let xk = random(&[3, 8], 30, -1.5, 1.5);
        let e1 = grad_check(
            |t, x| {
                let g = t.constant(gk.clone());
                let b = t.constant(bk.clone());
                let y = t.layer_norm(x, g, b, NORM_EPS)?;
                weighted_sum(t, y, 31)
            },
            &xk,
            h,
        )?;
        let e2 = grad_check(
            |t, g| {
                let x = t.constant(xk.clone());
                let b = t.constant(bk.clone());
                let y = t.layer_norm(x, g, b, NORM_EPS)?;
                weighted_sum(t, y, 32)
            },
            &gk,
            h,
        )?;
        push("layer_norm", vec![e1, e2]);
    }

    {
        let e = grad_check(
            |t, x| {
                let y = t.leaky_relu(x, LRELU_ALPHA);
                weighted_sum(t, y, 33)
            },
            &random(&[3, 7], 34, -2.0, 2.0),
            h,
        )?;
        push("leaky_relu", vec![e]);
    }

    {
        let x0 = random(&[3, 4], 35, -1.0, 1.0);
        let w0 = random(&[2, 4], 36, -0.5, 0.5);
        let b0 = random(&[2], 37, -0.2, 0.2);
        let e1 = grad_check(
            |t, x| {
                let w = t.constant(w0.clone());
                let b = t.constant(b0.clone());
                let y = t.linear(x, w, b)?;
                weighted_sum(t, y, 38)
            },
            &x0,
            h,
        )?;
        let e2 = grad_check(
            |t, w| {
                let x = t.constant(x0.clone());
                let b = t.constant(b0.clone());
                let y = t.linear(x, w, b)?;
                weighted_sum(t, y, 39)
            },
            &w0,
            h,
        )?;
        push("linear", vec![e1, e2]);
    }

    {
        let e = grad_check(
            |t, x| {
                let y = t.sigmoid(x);
                weighted_sum(t, y, 40)
            },
            &random(&[3, 5], 41, -3.0, 3.0),
            h,
        )?;
        push("sigmoid", vec![e]);
    }

    // the attention block as a unit, fusion path randomized away from
    // its identity initialization
    {
        let gen = Generator::build(50, scale)?;
        let x0 = random(&[1, gen.encoder[0].filters, 8, 8], 51, -1.0, 1.0);
        let mut blk = gen.gc[0].clone();
        let bound = (6.0 / blk.bottleneck as f64).sqrt();
        let fill = random(&[blk.channels, blk.bottleneck, 1, 1], 53, -bound, bound);
        blk.expand.weight = fill;
        let e = grad_check(
            |t, x| {
                let ids = blk.bind(t, false);
                let y = pamdn_core::model::GcBlock::forward(t, &ids, x)?;
                weighted_sum(t, y, 52)
            },
            &x0,
            h,
        )?;
        push("gc_block", vec![e]);
    }

    // loss terms with respect to the de-noised image / scores
    {
        let ext = PerceptualExtractor::seeded(60);
        let clean = random(&[1, 1, 8, 8], 61, 0.0, 1.0);
        let e1 = grad_check(
            |t, x| {
                let c = t.constant(clean.clone());
                perceptual_loss(t, x, c, &ext)
            },
            &random(&[1, 1, 8, 8], 62, 0.0, 1.0),
            h,
        )?;
        push("perceptual_loss", vec![e1]);

        let e2 = grad_check(
            |t, x| {
                let c = t.constant(clean.clone());
                smooth_l1_loss(t, x, c)
            },
            &random(&[1, 1, 8, 8], 63, 0.0, 0.9),
            h,
        )?;
        push("smooth_l1_loss", vec![e2]);

        let e3 = grad_check(
            |t, s| Ok(generator_adv_loss(t, s)),
            &random(&[4, 1], 64, 0.1, 0.9),
            h,
        )?;
        push("generator_adv_loss", vec![e3]);

        let fake = random(&[3, 1], 65, 0.1, 0.9);
        let e4 = grad_check(
            |t, real| {
                let f = t.constant(fake.clone());
                discriminator_loss(t, real, f)
            },
            &random(&[3, 1], 66, 0.1, 0.9),
            h,
        )?;
        push("discriminator_loss", vec![e4]);

        let w = LossWeights { k1: 0.6, k2: 0.3, k3: 1e-3 };
        let scores = random(&[1, 1], 67, 0.3, 0.7);
        let e5 = grad_check(
            |t, x| {
                let c = t.constant(clean.clone());
                let s = t.constant(scores.clone());
                Ok(combined_loss(t, x, c, s, &w, &ext)?.total)
            },
            &random(&[1, 1, 8, 8], 68, 0.0, 1.0),
            h,
        )?;
        push("combined_loss", vec![e5]);
    }

    // full networks, gradient with respect to the input image
    {
        let mut gen = Generator::build(70, scale)?;
        // activate the fusion paths at a scale that keeps every pixel's
        // gradient clear of the finite-difference noise floor
        for blk in &mut gen.gc {
            let bound = 0.5 * (6.0 / blk.bottleneck as f64).sqrt();
            blk.expand.weight =
                random(&[blk.channels, blk.bottleneck, 1, 1], 75 + blk.channels as u64, -bound, bound);
        }
        let x = random(&[1, 1, size, size], 71, 0.0, 1.0);
        let e = grad_check(
            |t, xid| {
                let ids = gen.bind(t, false);
                let y = gen.forward(t, &ids, xid)?;
                weighted_sum(t, y, 72)
            },
            &x,
            h,
        )?;
        push("generator", vec![e]);

        let disc = Discriminator::build(73, scale)?;
        let x = random(&[2, 1, size, size], 74, 0.0, 1.0);
        let e = grad_check(
            |t, xid| {
                let mut d = disc.clone();
                let ids = d.bind(t, false);
                let s = d.forward(t, &ids, xid, true)?;
                Ok(t.neg_log_sum(s))
            },
            &x,
            h,
        )?;
        push("discriminator", vec![e]);
    }

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_lists_each_op_once() {
        let results = gradcheck_suite(Scale::Eighth, 16, 1e-5).unwrap();
        let mut names: Vec<&str> = results.iter().map(|r| r.name).collect();
        let total = names.len();
        names.dedup();
        assert_eq!(names.len(), total, "duplicate op names in the report");
        for expect in [
            "conv2d",
            "conv2d_transpose",
            "maxpool2d",
            "instance_norm",
            "batch_norm",
            "layer_norm",
            "leaky_relu",
            "linear",
            "sigmoid",
            "gc_block",
            "perceptual_loss",
            "smooth_l1_loss",
            "generator_adv_loss",
            "discriminator_loss",
            "combined_loss",
            "generator",
            "discriminator",
        ] {
            assert!(names.contains(&expect), "missing {expect}");
        }
        for r in &results {
            assert!(r.passed(), "{}: {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn harness_flags_a_corrupted_gradient() {
        // an intentionally wrong backward rule must trip the tolerance
        let x = random(&[6], 90, 0.5, 2.0);
        let eval = |probe: &Tensor| -> pamdn_core::Result<f64> {
            Ok(probe.data().iter().map(|v| v * v).sum())
        };
        // claimed gradient 3x instead of the true 2x
        let wrong: Vec<f64> = x.data().iter().map(|v| 3.0 * v).collect();
        let err =
            pamdn_core::gradcheck::compare_against_numeric(&wrong, eval, &x, 1e-5).unwrap();
        assert!(err > GRADCHECK_TOLERANCE, "corruption went undetected: {err}");
    }
}
