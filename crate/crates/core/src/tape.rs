//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation computes its result eagerly and records enough on the
//! tape to replay its adjoint. Nodes are appended in execution order, so
//! the tape is already topologically sorted and `backward` is a single
//! reverse sweep. A node participates in the sweep only if some leaf
//! below it requires gradients, which keeps constant subgraphs (frozen
//! feature extractors, detached images) out of the backward pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims, ConvTDims};
use crate::tensor::Tensor;

/// Clamp bound applied to probabilities before taking logs.
pub const LOG_CLAMP: f64 = 1e-7;

/// Handle to a tensor stored on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Per-channel running statistics owned by a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub updates: u64,
}

impl BnStats {
    pub fn new(channels: usize) -> BnStats {
        BnStats { mean: vec![0.0; channels], var: vec![1.0; channels], updates: 0 }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: TensorId, w: TensorId, b: TensorId, dims: ConvDims },
    ConvT2d { x: TensorId, w: TensorId, b: TensorId, dims: ConvTDims },
    MaxPool2 { x: TensorId, argmax: Vec<u32> },
    // the norms cache the per-group mean and 1/sqrt(var + eps) seen at
    // forward time; xhat is recomputed from those during backward
    InstanceNorm { x: TensorId, gamma: TensorId, beta: TensorId, mean: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm { x: TensorId, gamma: TensorId, beta: TensorId, mean: Vec<f64>, inv_std: Vec<f64>, training: bool },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, mean: Vec<f64>, inv_std: Vec<f64> },
    LeakyRelu { x: TensorId, alpha: f64 },
    Relu { x: TensorId },
    Sigmoid { x: TensorId },
    Linear { x: TensorId, w: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, k: f64 },
    SumAll { x: TensorId },
    MeanAll { x: TensorId },
    SoftmaxSpatial { x: TensorId },
    MulSpatialAttn { x: TensorId, attn: TensorId },
    SumSpatial { x: TensorId },
    AddBroadcastSpatial { x: TensorId, v: TensorId },
    GlobalAvgPool { x: TensorId },
    ConcatChannels { a: TensorId, b: TensorId, ca: usize },
    MseMean { a: TensorId, b: TensorId },
    SmoothL1Mean { a: TensorId, b: TensorId },
    NegLogSum { s: TensorId },
    NegLogOneMinusSum { s: TensorId },
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. Its `requires_grad` flag decides whether
    /// backward will populate a gradient for it.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        let needs = t.requires_grad;
        self.push(t, needs, Op::Leaf)
    }

    /// Record an input that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor) -> TensorId {
        t.requires_grad = false;
        self.push(t, false, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> TensorId {
        self.nodes.push(Node { value, needs_grad, op });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn val(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    fn shape_of(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    // ── Convolution family ──────────────────────────────────────────

    /// Cross-correlation with symmetric zero padding.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        self.conv2d_padded(x, w, b, stride, [padding, padding, padding, padding])
    }

    /// Cross-correlation with explicit [top, bottom, left, right] padding.
    /// The output extent must divide exactly; a fractional window count is
    /// a configuration error rather than a silent floor.
    pub fn conv2d_padded(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: [usize; 4],
    ) -> Result<TensorId> {
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let xs = self.shape_of(x);
        let ws = self.shape_of(w);
        let bs = self.shape_of(b);
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Dim(format!(
                "conv2d wants NCHW input and (out_c, in_c, kh, kw) weight, got {xs:?} and {ws:?}"
            )));
        }
        let (n, ci, h, w_) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, wci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if ci != wci {
            return Err(Error::Dim(format!(
                "conv2d channel axes disagree: input channels {ci}, weight in_c {wci}"
            )));
        }
        if bs != [co] {
            return Err(Error::Dim(format!(
                "conv2d bias axis {bs:?} does not match out_c {co}"
            )));
        }
        let [pt, pb, pl, pr] = pad;
        let span_h = h + pt + pb;
        let span_w = w_ + pl + pr;
        if span_h < kh || span_w < kw {
            return Err(Error::Config(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {span_h}x{span_w}"
            )));
        }
        if (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0 {
            return Err(Error::Config(format!(
                "conv2d output size is not integral: ({span_h}-{kh})/{stride}, ({span_w}-{kw})/{stride}"
            )));
        }
        let oh = (span_h - kh) / stride + 1;
        let ow = (span_w - kw) / stride + 1;
        let dims = ConvDims {
            n, ci, h, w: w_, co, kh, kw, stride,
            pad_top: pt, pad_left: pl, oh, ow,
        };
        let mut y = vec![0.0; n * co * oh * ow];
        kernels::conv2d_fwd(self.val(x), self.val(w), self.val(b), &dims, &mut y);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let out = Tensor::from_vec(&[n, co, oh, ow], y)?;
        Ok(self.push(out, needs, Op::Conv2d { x, w, b, dims }))
    }

    /// Transposed convolution with kernel size equal to the stride, the
    /// exact up-sampling used between decoder stages. Weight layout is
    /// (in_c, out_c, k, k).
    pub fn conv2d_transpose(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
    ) -> Result<TensorId> {
        let xs = self.shape_of(x);
        let ws = self.shape_of(w);
        let bs = self.shape_of(b);
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Dim(format!(
                "conv2d_transpose wants NCHW input and (in_c, out_c, k, k) weight, got {xs:?} and {ws:?}"
            )));
        }
        let (n, ci, h, w_) = (xs[0], xs[1], xs[2], xs[3]);
        let (wci, co, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if kh != stride || kw != stride {
            return Err(Error::Config(format!(
                "conv2d_transpose kernel {kh}x{kw} must equal stride {stride}"
            )));
        }
        if ci != wci {
            return Err(Error::Dim(format!(
                "conv2d_transpose channel axes disagree: input channels {ci}, weight in_c {wci}"
            )));
        }
        if bs != [co] {
            return Err(Error::Dim(format!(
                "conv2d_transpose bias axis {bs:?} does not match out_c {co}"
            )));
        }
        let dims = ConvTDims { n, ci, h, w: w_, co, k: stride };
        let mut y = vec![0.0; n * co * h * stride * w_ * stride];
        kernels::convt2d_fwd(self.val(x), self.val(w), self.val(b), &dims, &mut y);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let out = Tensor::from_vec(&[n, co, h * stride, w_ * stride], y)?;
        Ok(self.push(out, needs, Op::ConvT2d { x, w, b, dims }))
    }

    /// 2x2 max pooling; gradient routes to the first argmax in row-major
    /// window order.
    pub fn maxpool2d(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape_of(x);
        if xs.len() != 4 {
            return Err(Error::Dim(format!("maxpool2d wants NCHW input, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dim(format!(
                "maxpool2d needs even spatial dims, got {h}x{w}"
            )));
        }
        let (y, argmax) = kernels::maxpool2_fwd(self.val(x), n, c, h, w);
        let needs = self.needs(x);
        let out = Tensor::from_vec(&[n, c, h / 2, w / 2], y)?;
        Ok(self.push(out, needs, Op::MaxPool2 { x, argmax }))
    }

    // ── Normalization ───────────────────────────────────────────────

    /// Per (sample, channel) spatial normalization with per-channel affine.
    pub fn instance_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let xs = self.shape_of(x);
        if xs.len() != 4 {
            return Err(Error::Dim(format!("instance_norm wants NCHW input, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        self.check_affine("instance_norm", gamma, beta, c)?;
        let plane = h * w;
        let mut mean = vec![0.0; n * c];
        let mut inv_std = vec![0.0; n * c];
        let mut y = vec![0.0; n * c * plane];
        {
            let xv = self.val(x);
            let g = self.val(gamma);
            let bt = self.val(beta);
            for nc in 0..n * c {
                let xp = &xv[nc * plane..][..plane];
                let m = kernels::sum(xp) / plane as f64;
                let var = kernels::sum_sq_dev(xp, m) / plane as f64;
                let istd = 1.0 / libm::sqrt(var + eps);
                mean[nc] = m;
                inv_std[nc] = istd;
                let (gc, bc) = (g[nc % c], bt[nc % c]);
                for (yo, &xi) in y[nc * plane..][..plane].iter_mut().zip(xp) {
                    *yo = (xi - m) * istd * gc + bc;
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let out = Tensor::from_vec(xs.to_vec().as_slice(), y)?;
        Ok(self.push(out, needs, Op::InstanceNorm { x, gamma, beta, mean, inv_std }))
    }

    /// Per-channel normalization over (N, H, W). Training mode uses batch
    /// statistics and folds them into the running stats; inference mode
    /// requires populated running stats.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        stats: &mut BnStats,
        momentum: f64,
        eps: f64,
        training: bool,
    ) -> Result<TensorId> {
        let xs = self.shape_of(x);
        if xs.len() != 4 {
            return Err(Error::Dim(format!("batch_norm wants NCHW input, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        self.check_affine("batch_norm", gamma, beta, c)?;
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Range(format!("batch_norm momentum {momentum} outside [0,1]")));
        }
        if !training && stats.updates == 0 {
            return Err(Error::State(
                "batch_norm inference before any training update populated running stats".into(),
            ));
        }
        let plane = h * w;
        let group = n * plane;
        let mut mean = vec![0.0; c];
        let mut inv_std = vec![0.0; c];
        let mut y = vec![0.0; n * c * plane];
        {
            let xv = self.val(x);
            let g = self.val(gamma);
            let bt = self.val(beta);
            for ch in 0..c {
                let (m, istd) = if training {
                    let mut s = 0.0;
                    for ni in 0..n {
                        s += kernels::sum(&xv[(ni * c + ch) * plane..][..plane]);
                    }
                    let m = s / group as f64;
                    let mut v = 0.0;
                    for ni in 0..n {
                        v += kernels::sum_sq_dev(&xv[(ni * c + ch) * plane..][..plane], m);
                    }
                    let var = v / group as f64;
                    stats.mean[ch] = (1.0 - momentum) * stats.mean[ch] + momentum * m;
                    stats.var[ch] = (1.0 - momentum) * stats.var[ch] + momentum * var;
                    (m, 1.0 / libm::sqrt(var + eps))
                } else {
                    (stats.mean[ch], 1.0 / libm::sqrt(stats.var[ch] + eps))
                };
                mean[ch] = m;
                inv_std[ch] = istd;
                for ni in 0..n {
                    let xp = &xv[(ni * c + ch) * plane..][..plane];
                    let yp = &mut y[(ni * c + ch) * plane..][..plane];
                    for (yo, &xi) in yp.iter_mut().zip(xp) {
                        *yo = (xi - m) * istd * g[ch] + bt[ch];
                    }
                }
            }
        }
        if training {
            stats.updates += 1;
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let out = Tensor::from_vec(xs.to_vec().as_slice(), y)?;
        Ok(self.push(out, needs, Op::BatchNorm { x, gamma, beta, mean, inv_std, training }))
    }

    /// Per-sample normalization over all non-batch axes, with an affine
    /// of the same per-sample extent.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let xs = self.shape_of(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::Dim(format!(
                "layer_norm wants a batch axis plus features, got {xs:?}"
            )));
        }
        let n = xs[0];
        let k: usize = xs[1..].iter().product();
        let gs = self.shape_of(gamma);
        let bs = self.shape_of(beta);
        if self.nodes[gamma.0].value.numel() != k || self.nodes[beta.0].value.numel() != k {
            return Err(Error::Dim(format!(
                "layer_norm affine {gs:?}/{bs:?} does not cover the {k} per-sample elements"
            )));
        }
        let mut mean = vec![0.0; n];
        let mut inv_std = vec![0.0; n];
        let mut y = vec![0.0; n * k];
        {
            let xv = self.val(x);
            let g = self.val(gamma);
            let bt = self.val(beta);
            for ni in 0..n {
                let xp = &xv[ni * k..][..k];
                let m = kernels::sum(xp) / k as f64;
                let var = kernels::sum_sq_dev(xp, m) / k as f64;
                let istd = 1.0 / libm::sqrt(var + eps);
                mean[ni] = m;
                inv_std[ni] = istd;
                for j in 0..k {
                    y[ni * k + j] = (xp[j] - m) * istd * g[j] + bt[j];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let out = Tensor::from_vec(&xs, y)?;
        Ok(self.push(out, needs, Op::LayerNorm { x, gamma, beta, mean, inv_std }))
    }

    fn check_affine(&self, op: &str, gamma: TensorId, beta: TensorId, c: usize) -> Result<()> {
        let gs = self.shape_of(gamma);
        let bs = self.shape_of(beta);
        if gs != [c] || bs != [c] {
            return Err(Error::Dim(format!(
                "{op} affine shapes {gs:?}/{bs:?} do not match {c} channels"
            )));
        }
        Ok(())
    }

    // ── Pointwise ───────────────────────────────────────────────────

    /// x for x >= 0, alpha*x below; the backward gate uses slope alpha
    /// at exactly zero.
    pub fn leaky_relu(&mut self, x: TensorId, alpha: f64) -> TensorId {
        let y: Vec<f64> = self
            .val(x)
            .iter()
            .map(|&v| if v >= 0.0 { v } else { alpha * v })
            .collect();
        let shape = self.shape_of(x).to_vec();
        let needs = self.needs(x);
        let out = Tensor::from_vec(&shape, y).unwrap();
        self.push(out, needs, Op::LeakyRelu { x, alpha })
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let y: Vec<f64> = self.val(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape_of(x).to_vec();
        let needs = self.needs(x);
        let out = Tensor::from_vec(&shape, y).unwrap();
        self.push(out, needs, Op::Relu { x })
    }

    /// Logistic function, kept strictly inside (0, 1) for finite inputs.
    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let hi = 1.0 - f64::EPSILON / 2.0;
        let y: Vec<f64> = self
            .val(x)
            .iter()
            .map(|&v| {
                let s = if v >= 0.0 {
                    1.0 / (1.0 + libm::exp(-v))
                } else {
                    let e = libm::exp(v);
                    e / (1.0 + e)
                };
                s.clamp(f64::MIN_POSITIVE, hi)
            })
            .collect();
        let shape = self.shape_of(x).to_vec();
        let needs = self.needs(x);
        let out = Tensor::from_vec(&shape, y).unwrap();
        self.push(out, needs, Op::Sigmoid { x })
    }

    /// Affine map x @ weight^T + bias for (N, F_in) inputs.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let xs = self.shape_of(x);
        let ws = self.shape_of(w);
        let bs = self.shape_of(b);
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::Dim(format!(
                "linear wants (N, F_in) input and (F_out, F_in) weight, got {xs:?} and {ws:?}"
            )));
        }
        let (n, fi) = (xs[0], xs[1]);
        let (fo, wfi) = (ws[0], ws[1]);
        if fi != wfi {
            return Err(Error::Dim(format!(
                "linear inner axes disagree: input features {fi}, weight in features {wfi}"
            )));
        }
        if bs != [fo] {
            return Err(Error::Dim(format!("linear bias axis {bs:?} does not match {fo}")));
        }
        let mut y = vec![0.0; n * fo];
        {
            let xv = self.val(x);
            let wv = self.val(w);
            let bv = self.val(b);
            for ni in 0..n {
                let xr = &xv[ni * fi..][..fi];
                for foi in 0..fo {
                    let wr = &wv[foi * fi..][..fi];
                    y[ni * fo + foi] = bv[foi] + kernels::dot(xr, wr);
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let out = Tensor::from_vec(&[n, fo], y)?;
        Ok(self.push(out, needs, Op::Linear { x, w, b }))
    }

    // ── Elementwise arithmetic (exact shapes) ───────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn zip_op(
        &mut self,
        name: &str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::Dim(format!(
                "{name} shapes disagree: {:?} vs {:?}",
                self.shape_of(a),
                self.shape_of(b)
            )));
        }
        let y: Vec<f64> = self.val(a).iter().zip(self.val(b)).map(|(&x, &z)| f(x, z)).collect();
        let shape = self.shape_of(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        let out = Tensor::from_vec(&shape, y)?;
        Ok(self.push(out, needs, op))
    }

    pub fn scale(&mut self, x: TensorId, k: f64) -> TensorId {
        let y: Vec<f64> = self.val(x).iter().map(|&v| k * v).collect();
        let shape = self.shape_of(x).to_vec();
        let needs = self.needs(x);
        let out = Tensor::from_vec(&shape, y).unwrap();
        self.push(out, needs, Op::Scale { x, k })
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s = kernels::sum(self.val(x));
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), needs, Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.val(x).len() as f64;
        let s = kernels::sum(self.val(x)) / n;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), needs, Op::MeanAll { x })
    }

    // ── Attention building blocks ───────────────────────────────────

    /// Softmax over the H*W positions of an (N, 1, H, W) logit map.
    pub fn softmax_spatial(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape_of(x).to_vec();
        if xs.len() != 4 || xs[1] != 1 {
            return Err(Error::Dim(format!(
                "softmax_spatial wants (N, 1, H, W) logits, got {xs:?}"
            )));
        }
        let plane = xs[2] * xs[3];
        let mut y = vec![0.0; xs[0] * plane];
        {
            let xv = self.val(x);
            for ni in 0..xs[0] {
                let xp = &xv[ni * plane..][..plane];
                let yp = &mut y[ni * plane..][..plane];
                let m = xp.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let mut z = 0.0;
                for (o, &v) in yp.iter_mut().zip(xp) {
                    *o = libm::exp(v - m);
                    z += *o;
                }
                yp.iter_mut().for_each(|o| *o /= z);
            }
        }
        let needs = self.needs(x);
        let out = Tensor::from_vec(&xs, y)?;
        Ok(self.push(out, needs, Op::SoftmaxSpatial { x }))
    }

    /// Broadcast-multiply features (N, C, H, W) by a single-channel
    /// spatial weight map (N, 1, H, W).
    pub fn mul_spatial_attn(&mut self, x: TensorId, attn: TensorId) -> Result<TensorId> {
        let xs = self.shape_of(x).to_vec();
        let as_ = self.shape_of(attn);
        if xs.len() != 4 || as_.len() != 4 || as_[1] != 1 || as_[0] != xs[0] || as_[2] != xs[2] || as_[3] != xs[3] {
            return Err(Error::Dim(format!(
                "mul_spatial_attn shapes disagree: {xs:?} vs {as_:?}"
            )));
        }
        let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let mut y = vec![0.0; n * c * plane];
        {
            let xv = self.val(x);
            let av = self.val(attn);
            for ni in 0..n {
                let ap = &av[ni * plane..][..plane];
                for ch in 0..c {
                    let xp = &xv[(ni * c + ch) * plane..][..plane];
                    let yp = &mut y[(ni * c + ch) * plane..][..plane];
                    for ((o, &xi), &ai) in yp.iter_mut().zip(xp).zip(ap) {
                        *o = xi * ai;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(attn);
        let out = Tensor::from_vec(&xs, y)?;
        Ok(self.push(out, needs, Op::MulSpatialAttn { x, attn }))
    }

    /// Reduce (N, C, H, W) over its spatial axes to (N, C, 1, 1).
    pub fn sum_spatial(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape_of(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Dim(format!("sum_spatial wants NCHW input, got {xs:?}")));
        }
        let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let mut y = vec![0.0; n * c];
        for nc in 0..n * c {
            y[nc] = kernels::sum(&self.val(x)[nc * plane..][..plane]);
        }
        let needs = self.needs(x);
        let out = Tensor::from_vec(&[n, c, 1, 1], y)?;
        Ok(self.push(out, needs, Op::SumSpatial { x }))
    }

    /// Add a per-(sample, channel) value (N, C, 1, 1) to every spatial
    /// position of (N, C, H, W).
    pub fn add_broadcast_spatial(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        let xs = self.shape_of(x).to_vec();
        let vs = self.shape_of(v);
        if xs.len() != 4 || vs != [xs[0], xs[1], 1, 1] {
            return Err(Error::Dim(format!(
                "add_broadcast_spatial wants (N, C, H, W) plus (N, C, 1, 1), got {xs:?} and {vs:?}"
            )));
        }
        let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let mut y = vec![0.0; n * c * plane];
        {
            let xv = self.val(x);
            let vv = self.val(v);
            for nc in 0..n * c {
                let xp = &xv[nc * plane..][..plane];
                let yp = &mut y[nc * plane..][..plane];
                for (o, &xi) in yp.iter_mut().zip(xp) {
                    *o = xi + vv[nc];
                }
            }
        }
        let needs = self.needs(x) || self.needs(v);
        let out = Tensor::from_vec(&xs, y)?;
        Ok(self.push(out, needs, Op::AddBroadcastSpatial { x, v }))
    }

    /// Mean over the spatial axes: (N, C, H, W) -> (N, C).
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape_of(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Dim(format!("global_avg_pool wants NCHW input, got {xs:?}")));
        }
        let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let mut y = vec![0.0; n * c];
        for nc in 0..n * c {
            y[nc] = kernels::sum(&self.val(x)[nc * plane..][..plane]) / plane as f64;
        }
        let needs = self.needs(x);
        let out = Tensor::from_vec(&[n, c], y)?;
        Ok(self.push(out, needs, Op::GlobalAvgPool { x }))
    }

    /// Concatenate two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let as_ = self.shape_of(a).to_vec();
        let bs = self.shape_of(b).to_vec();
        if as_.len() != 4 || bs.len() != 4 || as_[0] != bs[0] || as_[2] != bs[2] || as_[3] != bs[3] {
            return Err(Error::Dim(format!(
                "concat_channels non-channel axes disagree: {as_:?} vs {bs:?}"
            )));
        }
        let (n, ca, cb, plane) = (as_[0], as_[1], bs[1], as_[2] * as_[3]);
        let mut y = vec![0.0; n * (ca + cb) * plane];
        {
            let av = self.val(a);
            let bv = self.val(b);
            for ni in 0..n {
                let dst = &mut y[ni * (ca + cb) * plane..][..(ca + cb) * plane];
                dst[..ca * plane].copy_from_slice(&av[ni * ca * plane..][..ca * plane]);
                dst[ca * plane..].copy_from_slice(&bv[ni * cb * plane..][..cb * plane]);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        let out = Tensor::from_vec(&[n, ca + cb, as_[2], as_[3]], y)?;
        Ok(self.push(out, needs, Op::ConcatChannels { a, b, ca }))
    }

    // ── Scalar losses ───────────────────────────────────────────────

    /// Mean squared difference over all elements.
    pub fn mse_mean(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::Dim(format!(
                "mse_mean shapes disagree: {:?} vs {:?}",
                self.shape_of(a),
                self.shape_of(b)
            )));
        }
        let m = self.val(a).len() as f64;
        let s: f64 = self
            .val(a)
            .iter()
            .zip(self.val(b))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(s / m), needs, Op::MseMean { a, b }))
    }

    /// Mean smooth-L1: 0.5 d^2 under unit error, |d| - 0.5 above it.
    pub fn smooth_l1_mean(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::Dim(format!(
                "smooth_l1_mean shapes disagree: {:?} vs {:?}",
                self.shape_of(a),
                self.shape_of(b)
            )));
        }
        let m = self.val(a).len() as f64;
        let s: f64 = self
            .val(a)
            .iter()
            .zip(self.val(b))
            .map(|(&x, &y)| {
                let d = x - y;
                if d.abs() < 1.0 {
                    0.5 * d * d
                } else {
                    d.abs() - 0.5
                }
            })
            .sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(s / m), needs, Op::SmoothL1Mean { a, b }))
    }

    /// Sum of -log(s) over the batch, scores clamped away from 0 and 1.
    pub fn neg_log_sum(&mut self, s: TensorId) -> TensorId {
        let v: f64 = self
            .val(s)
            .iter()
            .map(|&p| -libm::log(p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP)))
            .sum();
        let needs = self.needs(s);
        self.push(Tensor::scalar(v), needs, Op::NegLogSum { s })
    }

    /// Sum of -log(1 - s) over the batch, with the same clamping.
    pub fn neg_log_one_minus_sum(&mut self, s: TensorId) -> TensorId {
        let v: f64 = self
            .val(s)
            .iter()
            .map(|&p| -libm::log((1.0 - p).clamp(LOG_CLAMP, 1.0 - LOG_CLAMP)))
            .sum();
        let needs = self.needs(s);
        self.push(Tensor::scalar(v), needs, Op::NegLogOneMinusSum { s })
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates the grad buffer of
    /// every requires_grad tensor the loss depends on; the loss's own
    /// gradient with respect to itself is 1.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(gy);
            }
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad {
                // reachable leaves keep their accumulated grad; an
                // unreachable requires_grad leaf gets explicit zeros
                node.value.grad = Some(g.unwrap_or_else(|| vec![0.0; node.value.numel()]));
            }
        }
        self.nodes[loss.0].value.grad = Some(vec![1.0]);
        Ok(())
    }

    fn accum(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: TensorId, add: impl FnOnce(&mut [f64])) {
        if !nodes[id.0].needs_grad {
            return;
        }
        let buf = grads[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].value.numel()]);
        add(buf);
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        match &nodes[i].op {
            Op::Leaf => {}

            Op::Conv2d { x, w, b, dims } => {
                Self::accum(grads, nodes, *x, |dx| {
                    kernels::conv2d_bwd_input(gy, nodes[w.0].value.data(), dims, dx)
                });
                Self::accum(grads, nodes, *w, |dw| {
                    kernels::conv2d_bwd_weight(gy, nodes[x.0].value.data(), dims, dw)
                });
                Self::accum(grads, nodes, *b, |db| kernels::conv2d_bwd_bias(gy, dims, db));
            }

            Op::ConvT2d { x, w, b, dims } => {
                Self::accum(grads, nodes, *x, |dx| {
                    kernels::convt2d_bwd_input(gy, nodes[w.0].value.data(), dims, dx)
                });
                Self::accum(grads, nodes, *w, |dw| {
                    kernels::convt2d_bwd_weight(gy, nodes[x.0].value.data(), dims, dw)
                });
                Self::accum(grads, nodes, *b, |db| kernels::convt2d_bwd_bias(gy, dims, db));
            }

            Op::MaxPool2 { x, argmax } => {
                Self::accum(grads, nodes, *x, |dx| kernels::maxpool2_bwd(gy, argmax, dx));
            }

            Op::InstanceNorm { x, gamma, beta, mean, inv_std } => {
                let xs = nodes[x.0].value.shape();
                let (c, plane) = (xs[1], xs[2] * xs[3]);
                let xv = nodes[x.0].value.data();
                let g = nodes[gamma.0].value.data();
                Self::accum(grads, nodes, *x, |dx| {
                    for nc in 0..mean.len() {
                        norm_bwd_input(
                            &xv[nc * plane..][..plane],
                            &gy[nc * plane..][..plane],
                            mean[nc],
                            inv_std[nc],
                            |_| g[nc % c],
                            &mut dx[nc * plane..][..plane],
                        );
                    }
                });
                Self::accum(grads, nodes, *gamma, |dg| {
                    for nc in 0..mean.len() {
                        let (m, istd) = (mean[nc], inv_std[nc]);
                        let xp = &xv[nc * plane..][..plane];
                        let gp = &gy[nc * plane..][..plane];
                        let mut acc = 0.0;
                        for (xi, gi) in xp.iter().zip(gp) {
                            acc += gi * (xi - m) * istd;
                        }
                        dg[nc % c] += acc;
                    }
                });
                Self::accum(grads, nodes, *beta, |db| {
                    for nc in 0..mean.len() {
                        db[nc % c] += gy[nc * plane..][..plane].iter().sum::<f64>();
                    }
                });
            }

            Op::BatchNorm { x, gamma, beta, mean, inv_std, training } => {
                let xs = nodes[x.0].value.shape();
                let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                let xv = nodes[x.0].value.data();
                let g = nodes[gamma.0].value.data();
                // gather each channel's scattered slices once
                let gather = |buf: &[f64], ch: usize| -> Vec<f64> {
                    let mut out = Vec::with_capacity(n * plane);
                    for ni in 0..n {
                        out.extend_from_slice(&buf[(ni * c + ch) * plane..][..plane]);
                    }
                    out
                };
                Self::accum(grads, nodes, *x, |dx| {
                    for ch in 0..c {
                        let xg = gather(xv, ch);
                        let gg = gather(gy, ch);
                        let mut dxg = vec![0.0; xg.len()];
                        if *training {
                            norm_bwd_input(&xg, &gg, mean[ch], inv_std[ch], |_| g[ch], &mut dxg);
                        } else {
                            for (o, gi) in dxg.iter_mut().zip(&gg) {
                                *o = gi * g[ch] * inv_std[ch];
                            }
                        }
                        for ni in 0..n {
                            let dst = &mut dx[(ni * c + ch) * plane..][..plane];
                            for (d, s) in dst.iter_mut().zip(&dxg[ni * plane..][..plane]) {
                                *d += s;
                            }
                        }
                    }
                });
                Self::accum(grads, nodes, *gamma, |dg| {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for ni in 0..n {
                            let xp = &xv[(ni * c + ch) * plane..][..plane];
                            let gp = &gy[(ni * c + ch) * plane..][..plane];
                            for (xi, gi) in xp.iter().zip(gp) {
                                acc += gi * (xi - mean[ch]) * inv_std[ch];
                            }
                        }
                        dg[ch] += acc;
                    }
                });
                Self::accum(grads, nodes, *beta, |db| {
                    for ch in 0..c {
                        for ni in 0..n {
                            db[ch] += gy[(ni * c + ch) * plane..][..plane].iter().sum::<f64>();
                        }
                    }
                });
            }

            Op::LayerNorm { x, gamma, beta, mean, inv_std } => {
                let k = nodes[x.0].value.numel() / mean.len();
                let xv = nodes[x.0].value.data();
                let g = nodes[gamma.0].value.data();
                Self::accum(grads, nodes, *x, |dx| {
                    for ni in 0..mean.len() {
                        norm_bwd_input(
                            &xv[ni * k..][..k],
                            &gy[ni * k..][..k],
                            mean[ni],
                            inv_std[ni],
                            |j| g[j],
                            &mut dx[ni * k..][..k],
                        );
                    }
                });
                Self::accum(grads, nodes, *gamma, |dg| {
                    for ni in 0..mean.len() {
                        let (m, istd) = (mean[ni], inv_std[ni]);
                        for j in 0..k {
                            dg[j] += gy[ni * k + j] * (xv[ni * k + j] - m) * istd;
                        }
                    }
                });
                Self::accum(grads, nodes, *beta, |db| {
                    for ni in 0..mean.len() {
                        for j in 0..k {
                            db[j] += gy[ni * k + j];
                        }
                    }
                });
            }

            Op::LeakyRelu { x, alpha } => {
                let xv = nodes[x.0].value.data();
                let a = *alpha;
                Self::accum(grads, nodes, *x, |dx| {
                    for ((d, gi), &xi) in dx.iter_mut().zip(gy).zip(xv) {
                        *d += gi * if xi > 0.0 { 1.0 } else { a };
                    }
                });
            }

            Op::Relu { x } => {
                let xv = nodes[x.0].value.data();
                Self::accum(grads, nodes, *x, |dx| {
                    for ((d, gi), &xi) in dx.iter_mut().zip(gy).zip(xv) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }

            Op::Sigmoid { x } => {
                let yv = nodes[i].value.data();
                Self::accum(grads, nodes, *x, |dx| {
                    for ((d, gi), &yi) in dx.iter_mut().zip(gy).zip(yv) {
                        *d += gi * yi * (1.0 - yi);
                    }
                });
            }

            Op::Linear { x, w, b } => {
                let xs = nodes[x.0].value.shape();
                let ws = nodes[w.0].value.shape();
                let (n, fi, fo) = (xs[0], xs[1], ws[0]);
                let xv = nodes[x.0].value.data();
                let wv = nodes[w.0].value.data();
                Self::accum(grads, nodes, *x, |dx| {
                    for ni in 0..n {
                        for foi in 0..fo {
                            let gi = gy[ni * fo + foi];
                            let wr = &wv[foi * fi..][..fi];
                            let dr = &mut dx[ni * fi..][..fi];
                            for (d, wj) in dr.iter_mut().zip(wr) {
                                *d += gi * wj;
                            }
                        }
                    }
                });
                Self::accum(grads, nodes, *w, |dw| {
                    for ni in 0..n {
                        let xr = &xv[ni * fi..][..fi];
                        for foi in 0..fo {
                            let gi = gy[ni * fo + foi];
                            let dr = &mut dw[foi * fi..][..fi];
                            for (d, xj) in dr.iter_mut().zip(xr) {
                                *d += gi * xj;
                            }
                        }
                    }
                });
                Self::accum(grads, nodes, *b, |db| {
                    for ni in 0..n {
                        for foi in 0..fo {
                            db[foi] += gy[ni * fo + foi];
                        }
                    }
                });
            }

            Op::Add { a, b } => {
                Self::accum(grads, nodes, *a, |da| {
                    da.iter_mut().zip(gy).for_each(|(d, g)| *d += g);
                });
                Self::accum(grads, nodes, *b, |db| {
                    db.iter_mut().zip(gy).for_each(|(d, g)| *d += g);
                });
            }

            Op::Sub { a, b } => {
                Self::accum(grads, nodes, *a, |da| {
                    da.iter_mut().zip(gy).for_each(|(d, g)| *d += g);
                });
                Self::accum(grads, nodes, *b, |db| {
                    db.iter_mut().zip(gy).for_each(|(d, g)| *d -= g);
                });
            }

            Op::Mul { a, b } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                Self::accum(grads, nodes, *a, |da| {
                    for ((d, g), &bi) in da.iter_mut().zip(gy).zip(bv) {
                        *d += g * bi;
                    }
                });
                Self::accum(grads, nodes, *b, |db| {
                    for ((d, g), &ai) in db.iter_mut().zip(gy).zip(av) {
                        *d += g * ai;
                    }
                });
            }

            Op::Scale { x, k } => {
                let k = *k;
                Self::accum(grads, nodes, *x, |dx| {
                    dx.iter_mut().zip(gy).for_each(|(d, g)| *d += k * g);
                });
            }

            Op::SumAll { x } => {
                let g0 = gy[0];
                Self::accum(grads, nodes, *x, |dx| {
                    dx.iter_mut().for_each(|d| *d += g0);
                });
            }

            Op::MeanAll { x } => {
                let g0 = gy[0] / nodes[x.0].value.numel() as f64;
                Self::accum(grads, nodes, *x, |dx| {
                    dx.iter_mut().for_each(|d| *d += g0);
                });
            }

            Op::SoftmaxSpatial { x } => {
                let yv = nodes[i].value.data();
                let xs = nodes[x.0].value.shape();
                let plane = xs[2] * xs[3];
                Self::accum(grads, nodes, *x, |dx| {
                    for ni in 0..xs[0] {
                        let sp = &yv[ni * plane..][..plane];
                        let gp = &gy[ni * plane..][..plane];
                        let dot: f64 = sp.iter().zip(gp).map(|(&s, &g)| s * g).sum();
                        let dp = &mut dx[ni * plane..][..plane];
                        for ((d, &s), &g) in dp.iter_mut().zip(sp).zip(gp) {
                            *d += s * (g - dot);
                        }
                    }
                });
            }

            Op::MulSpatialAttn { x, attn } => {
                let xs = nodes[x.0].value.shape();
                let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                let xv = nodes[x.0].value.data();
                let av = nodes[attn.0].value.data();
                Self::accum(grads, nodes, *x, |dx| {
                    for ni in 0..n {
                        let ap = &av[ni * plane..][..plane];
                        for ch in 0..c {
                            let off = (ni * c + ch) * plane;
                            for ((d, g), &ai) in
                                dx[off..][..plane].iter_mut().zip(&gy[off..][..plane]).zip(ap)
                            {
                                *d += g * ai;
                            }
                        }
                    }
                });
                Self::accum(grads, nodes, *attn, |da| {
                    for ni in 0..n {
                        let dap = &mut da[ni * plane..][..plane];
                        for ch in 0..c {
                            let off = (ni * c + ch) * plane;
                            let xp = &xv[off..][..plane];
                            let gp = &gy[off..][..plane];
                            for ((d, &xi), &g) in dap.iter_mut().zip(xp).zip(gp) {
                                *d += g * xi;
                            }
                        }
                    }
                });
            }

            Op::SumSpatial { x } => {
                let xs = nodes[x.0].value.shape();
                let plane = xs[2] * xs[3];
                Self::accum(grads, nodes, *x, |dx| {
                    for nc in 0..xs[0] * xs[1] {
                        let g = gy[nc];
                        dx[nc * plane..][..plane].iter_mut().for_each(|d| *d += g);
                    }
                });
            }

            Op::AddBroadcastSpatial { x, v } => {
                let xs = nodes[x.0].value.shape();
                let plane = xs[2] * xs[3];
                Self::accum(grads, nodes, *x, |dx| {
                    dx.iter_mut().zip(gy).for_each(|(d, g)| *d += g);
                });
                Self::accum(grads, nodes, *v, |dv| {
                    for nc in 0..xs[0] * xs[1] {
                        dv[nc] += gy[nc * plane..][..plane].iter().sum::<f64>();
                    }
                });
            }

            Op::GlobalAvgPool { x } => {
                let xs = nodes[x.0].value.shape();
                let plane = xs[2] * xs[3];
                Self::accum(grads, nodes, *x, |dx| {
                    for nc in 0..xs[0] * xs[1] {
                        let g = gy[nc] / plane as f64;
                        dx[nc * plane..][..plane].iter_mut().for_each(|d| *d += g);
                    }
                });
            }

            Op::ConcatChannels { a, b, ca } => {
                let as_ = nodes[a.0].value.shape();
                let bs = nodes[b.0].value.shape();
                let (n, cb, plane) = (as_[0], bs[1], as_[2] * as_[3]);
                let ct = ca + cb;
                Self::accum(grads, nodes, *a, |da| {
                    for ni in 0..n {
                        let src = &gy[ni * ct * plane..][..ca * plane];
                        let dst = &mut da[ni * ca * plane..][..ca * plane];
                        dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                });
                Self::accum(grads, nodes, *b, |db| {
                    for ni in 0..n {
                        let src = &gy[ni * ct * plane + ca * plane..][..cb * plane];
                        let dst = &mut db[ni * cb * plane..][..cb * plane];
                        dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                });
            }

            Op::MseMean { a, b } => {
                let m = nodes[a.0].value.numel() as f64;
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let g0 = gy[0];
                Self::accum(grads, nodes, *a, |da| {
                    for ((d, &x), &y) in da.iter_mut().zip(av).zip(bv) {
                        *d += g0 * 2.0 * (x - y) / m;
                    }
                });
                Self::accum(grads, nodes, *b, |db| {
                    for ((d, &x), &y) in db.iter_mut().zip(av).zip(bv) {
                        *d -= g0 * 2.0 * (x - y) / m;
                    }
                });
            }

            Op::SmoothL1Mean { a, b } => {
                let m = nodes[a.0].value.numel() as f64;
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let g0 = gy[0];
                let slope = |d: f64| if d.abs() < 1.0 { d } else { d.signum() };
                Self::accum(grads, nodes, *a, |da| {
                    for ((o, &x), &y) in da.iter_mut().zip(av).zip(bv) {
                        *o += g0 * slope(x - y) / m;
                    }
                });
                Self::accum(grads, nodes, *b, |db| {
                    for ((o, &x), &y) in db.iter_mut().zip(av).zip(bv) {
                        *o -= g0 * slope(x - y) / m;
                    }
                });
            }

            Op::NegLogSum { s } => {
                let sv = nodes[s.0].value.data();
                let g0 = gy[0];
                Self::accum(grads, nodes, *s, |ds| {
                    for (d, &p) in ds.iter_mut().zip(sv) {
                        if p > LOG_CLAMP && p < 1.0 - LOG_CLAMP {
                            *d += g0 * (-1.0 / p);
                        }
                    }
                });
            }

            Op::NegLogOneMinusSum { s } => {
                let sv = nodes[s.0].value.data();
                let g0 = gy[0];
                Self::accum(grads, nodes, *s, |ds| {
                    for (d, &p) in ds.iter_mut().zip(sv) {
                        if p > LOG_CLAMP && p < 1.0 - LOG_CLAMP {
                            *d += g0 / (1.0 - p);
                        }
                    }
                });
            }
        }
    }
}

/// Shared input-gradient rule for the three normalizations over one
/// group of `k` elements normalized with population statistics:
/// dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat . xhat)).
fn norm_bwd_input(
    x: &[f64],
    gy: &[f64],
    mean: f64,
    inv_std: f64,
    gamma_at: impl Fn(usize) -> f64,
    dx: &mut [f64],
) {
    let k = x.len() as f64;
    let mut sum_dxhat = 0.0;
    let mut sum_dxhat_xhat = 0.0;
    for (j, (&xi, &gi)) in x.iter().zip(gy).enumerate() {
        let dxhat = gi * gamma_at(j);
        let xhat = (xi - mean) * inv_std;
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
    }
    let m_dxhat = sum_dxhat / k;
    let m_dxhat_xhat = sum_dxhat_xhat / k;
    for (j, (&xi, &gi)) in x.iter().zip(gy).enumerate() {
        let dxhat = gi * gamma_at(j);
        let xhat = (xi - mean) * inv_std;
        dx[j] += inv_std * (dxhat - m_dxhat - xhat * m_dxhat_xhat);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = Rng::new(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.range(lo, hi)).collect()).unwrap()
    }

    fn assert_close(got: &[f64], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= tol, "{got:?} vs {want:?}");
        }
    }

    // ── conv2d ──────────────────────────────────────────────────────

    #[test]
    fn conv2d_hand_value() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[5.0]);
    }

    #[test]
    fn conv2d_zero_weight_annihilates() {
        let mut tape = Tape::new();
        let x = tape.leaf(random(&[2, 3, 8, 8], 5, -1.0, 1.0));
        let w = tape.leaf(Tensor::zeros(&[4, 3, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[4]));
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_same_padding_preserves_shape() {
        let mut tape = Tape::new();
        let x = tape.leaf(random(&[2, 3, 16, 16], 6, -1.0, 1.0));
        let w = tape.leaf(random(&[8, 3, 3, 3], 7, -0.5, 0.5));
        let b = tape.leaf(Tensor::zeros(&[8]));
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 8, 16, 16]);
    }

    #[test]
    fn conv2d_errors_name_the_axes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.leaf(Tensor::zeros(&[3, 5, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[3]));
        match tape.conv2d(x, w, b, 1, 1) {
            Err(Error::Dim(m)) => assert!(m.contains("channels 2") && m.contains("in_c 5"), "{m}"),
            other => panic!("expected dim error, got {other:?}"),
        }
        // even input, 3x3 kernel, stride 2: window count is fractional
        let x = tape.leaf(Tensor::zeros(&[1, 1, 64, 64]));
        let w = tape.leaf(Tensor::zeros(&[1, 1, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv2d(x, w, b, 2, 1), Err(Error::Config(_))));
    }

    #[test]
    fn conv2d_asymmetric_padding_halves_even_inputs() {
        let mut tape = Tape::new();
        let x = tape.leaf(random(&[1, 2, 16, 16], 8, -1.0, 1.0));
        let w = tape.leaf(random(&[4, 2, 3, 3], 9, -0.5, 0.5));
        let b = tape.leaf(Tensor::zeros(&[4]));
        let y = tape.conv2d_padded(x, w, b, 2, [0, 1, 0, 1]).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 4, 8, 8]);
    }

    // ── conv2d_transpose ────────────────────────────────────────────

    #[test]
    fn convt_hand_scatter() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 1, 1], &[1.0]));
        let w = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 1.0, 1.0, 1.0]));
        let b = tape.leaf(t(&[1], &[0.0]));
        let y = tape.conv2d_transpose(x, w, b, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn convt_doubles_shape_and_zero_weight_annihilates() {
        let mut tape = Tape::new();
        let x = tape.leaf(random(&[1, 3, 2, 2], 10, -1.0, 1.0));
        let w = tape.leaf(Tensor::zeros(&[3, 5, 2, 2]));
        let b = tape.leaf(Tensor::zeros(&[5]));
        let y = tape.conv2d_transpose(x, w, b, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 5, 4, 4]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn convt_kernel_stride_mismatch_is_config_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        let w = tape.leaf(Tensor::zeros(&[1, 1, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv2d_transpose(x, w, b, 2), Err(Error::Config(_))));
    }

    // ── maxpool2d ───────────────────────────────────────────────────

    #[test]
    fn maxpool_hand_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2d(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let c = tape.leaf(Tensor::filled(&[1, 2, 4, 4], 0.7));
        let yc = tape.maxpool2d(c).unwrap();
        assert_eq!(tape.value(yc).shape(), &[1, 2, 2, 2]);
        assert!(tape.value(yc).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn maxpool_backward_routes_to_argmax_only() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let y = tape.maxpool2d(x).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_tie_break_picks_first_in_row_major() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[1, 1, 2, 2], 7.0).with_grad());
        let y = tape.maxpool2d(x).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_odd_dims_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(matches!(tape.maxpool2d(x), Err(Error::Dim(_))));
    }

    // ── normalizations ──────────────────────────────────────────────

    #[test]
    fn instance_norm_hand_values() {
        let mut tape = Tape::new();
        // constant plane collapses to zero
        let x = tape.leaf(Tensor::filled(&[1, 1, 2, 2], 3.3));
        let g = tape.leaf(t(&[1], &[1.0]));
        let b = tape.leaf(t(&[1], &[0.0]));
        let y = tape.instance_norm(x, g, b, 1e-5).unwrap();
        assert_close(tape.value(y).data(), &[0.0; 4], 1e-9);

        // plane [-1, 1] keeps unit variance as eps -> 0
        let x = tape.leaf(t(&[1, 1, 1, 2], &[-1.0, 1.0]));
        let y = tape.instance_norm(x, g, b, 1e-12).unwrap();
        assert_close(tape.value(y).data(), &[-1.0, 1.0], 1e-9);

        // gamma 0 / beta 5 overrides everything
        let x = tape.leaf(random(&[2, 1, 4, 4], 11, 0.0, 1.0));
        let g0 = tape.leaf(t(&[1], &[0.0]));
        let b5 = tape.leaf(t(&[1], &[5.0]));
        let y = tape.instance_norm(x, g0, b5, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn instance_norm_moments_match_affine() {
        let mut tape = Tape::new();
        // plane variance must dwarf eps for the moment identity to hold
        let x = tape.leaf(random(&[2, 3, 8, 8], 12, -20.0, 20.0));
        let g = tape.leaf(t(&[3], &[1.0, 2.0, 0.5]));
        let b = tape.leaf(t(&[3], &[0.0, -1.0, 3.0]));
        let y = tape.instance_norm(x, g, b, 1e-5).unwrap();
        let yv = tape.value(y).data();
        for n in 0..2 {
            for c in 0..3 {
                let plane = &yv[(n * 3 + c) * 64..][..64];
                let mean = plane.iter().sum::<f64>() / 64.0;
                let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
                let (gc, bc) = ([1.0, 2.0, 0.5][c], [0.0, -1.0, 3.0][c]);
                assert!((mean - bc).abs() < 1e-9, "mean {mean} vs beta {bc}");
                assert!((var - gc * gc).abs() < 1e-6, "var {var} vs gamma^2 {}", gc * gc);
            }
        }
    }

    #[test]
    fn batch_norm_hand_values() {
        // constant batch collapses to zero
        let mut tape = Tape::new();
        let mut stats = BnStats::new(1);
        let g = tape.leaf(t(&[1], &[1.0]));
        let b = tape.leaf(t(&[1], &[0.0]));
        let x = tape.leaf(Tensor::filled(&[2, 1, 2, 2], 1.7));
        let y = tape.batch_norm(x, g, b, &mut stats, 0.1, 1e-5, true).unwrap();
        assert_close(tape.value(y).data(), &[0.0; 8], 1e-9);

        // momentum 1 snaps running stats to batch stats
        let mut stats = BnStats::new(1);
        let x = tape.leaf(t(&[2, 1, 1, 1], &[0.0, 2.0]));
        let y = tape.batch_norm(x, g, b, &mut stats, 1.0, 1e-12, true).unwrap();
        assert_close(tape.value(y).data(), &[-1.0, 1.0], 1e-6);
        assert_close(&stats.mean, &[1.0], 1e-12);
        assert_close(&stats.var, &[1.0], 1e-12);
        assert_eq!(stats.updates, 1);

        // inference mode uses the stored stats
        let x2 = tape.leaf(t(&[1, 1, 1, 1], &[3.0]));
        let y2 = tape.batch_norm(x2, g, b, &mut stats, 1.0, 1e-12, false).unwrap();
        assert_close(tape.value(y2).data(), &[2.0], 1e-6);
    }

    #[test]
    fn batch_norm_inference_without_stats_is_state_error() {
        let mut tape = Tape::new();
        let mut stats = BnStats::new(1);
        let g = tape.leaf(t(&[1], &[1.0]));
        let b = tape.leaf(t(&[1], &[0.0]));
        let x = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(matches!(
            tape.batch_norm(x, g, b, &mut stats, 0.1, 1e-5, false),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn layer_norm_hand_values() {
        let mut tape = Tape::new();
        let g = tape.leaf(t(&[2], &[1.0, 1.0]));
        let b = tape.leaf(t(&[2], &[0.25, 0.25]));
        // constant input produces beta everywhere
        let x = tape.leaf(Tensor::filled(&[3, 2], 9.0));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_close(tape.value(y).data(), &[0.25; 6], 1e-9);

        // {-3, 3} normalizes to {-1, 1}
        let b0 = tape.leaf(t(&[2], &[0.0, 0.0]));
        let x = tape.leaf(t(&[1, 2], &[-3.0, 3.0]));
        let y = tape.layer_norm(x, g, b0, 1e-12).unwrap();
        assert_close(tape.value(y).data(), &[-1.0, 1.0], 1e-9);

        // gamma 2 doubles the gamma 1 output
        let g2 = tape.leaf(t(&[2], &[2.0, 2.0]));
        let y2 = tape.layer_norm(x, g2, b0, 1e-12).unwrap();
        let doubled: Vec<f64> = tape.value(y).data().iter().map(|v| 2.0 * v).collect();
        assert_close(tape.value(y2).data(), &doubled, 1e-12);
    }

    // ── pointwise ───────────────────────────────────────────────────

    #[test]
    fn leaky_relu_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[3.0, -5.0, 0.0]));
        let y = tape.leaky_relu(x, 0.2);
        assert_eq!(tape.value(y).data(), &[3.0, -1.0, 0.0]);
        let y1 = tape.leaky_relu(x, 1.0);
        assert_eq!(tape.value(y1).data(), &[3.0, -5.0, 0.0]);
    }

    #[test]
    fn sigmoid_values_and_symmetry() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[0.0, 50.0]));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).data()[0], 0.5);
        assert!((tape.value(y).data()[1] - 1.0).abs() < 1e-9);

        let xs = random(&[64], 13, -30.0, 30.0);
        let neg: Vec<f64> = xs.data().iter().map(|v| -v).collect();
        let a = tape.leaf(xs.clone());
        let b = tape.leaf(t(&[64], &neg));
        let sa = tape.sigmoid(a);
        let sb = tape.sigmoid(b);
        for (p, q) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
            assert!((p + q - 1.0).abs() < 1e-12);
            assert!(*p > 0.0 && *p < 1.0);
        }
    }

    #[test]
    fn linear_hand_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.leaf(t(&[1, 2], &[3.0, 4.0]));
        let b = tape.leaf(t(&[1], &[1.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[12.0]);

        // identity weight, zero bias
        let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b0 = tape.leaf(t(&[2], &[0.0, 0.0]));
        let y = tape.linear(x, eye, b0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        // zero weight broadcasts the bias
        let z = tape.leaf(Tensor::zeros(&[2, 2]));
        let b1 = tape.leaf(t(&[2], &[0.5, -0.5]));
        let y = tape.linear(x, z, b1).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -0.5, 0.5, -0.5]);

        let bad = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.linear(x, bad, b1), Err(Error::Dim(_))));
    }

    // ── backward basics ─────────────────────────────────────────────

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(random(&[2, 3], 14, -1.0, 1.0).with_grad());
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
        assert_eq!(tape.value(loss).grad.as_deref(), Some(&[1.0][..]));
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn detached_tensor_receives_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let c = tape.constant(t(&[2], &[5.0, 5.0]));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0, 5.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(random(&[2, 2, 8, 8], 15, -1.0, 1.0));
            let w = tape.leaf(random(&[3, 2, 3, 3], 16, -0.5, 0.5));
            let b = tape.leaf(random(&[3], 17, -0.1, 0.1));
            let y = tape.conv2d(x, w, b, 1, 1).unwrap();
            let a = tape.leaky_relu(y, 0.2);
            tape.value(a).content_hash()
        };
        assert_eq!(run(), run());
    }

    // ── attention blocks ────────────────────────────────────────────

    #[test]
    fn softmax_spatial_sums_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(random(&[3, 1, 4, 4], 18, -3.0, 3.0));
        let y = tape.softmax_spatial(x).unwrap();
        let yv = tape.value(y).data();
        for n in 0..3 {
            let s: f64 = yv[n * 16..][..16].iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "sum {s}");
        }
    }

    #[test]
    fn concat_splits_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(random(&[1, 2, 2, 2], 19, -1.0, 1.0).with_grad());
        let b = tape.leaf(random(&[1, 3, 2, 2], 20, -1.0, 1.0).with_grad());
        let y = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 5, 2, 2]);
        let r = tape.constant(random(&[1, 5, 2, 2], 21, -1.0, 1.0));
        let m = tape.mul(y, r).unwrap();
        let loss = tape.sum_all(m);
        tape.backward(loss).unwrap();
        let rv = tape.value(r).data().to_vec();
        assert_close(tape.grad(a).unwrap(), &rv[..8], 1e-12);
        assert_close(tape.grad(b).unwrap(), &rv[8..], 1e-12);
    }

    // ── losses ──────────────────────────────────────────────────────

    #[test]
    fn smooth_l1_branch_values() {
        // single pixel at delta 0.5: 0.5 * 0.25 / n
        let mut tape = Tape::new();
        let n = 16.0;
        let mut a = Tensor::zeros(&[1, 1, 4, 4]);
        a.data_mut()[3] = 0.5;
        let b = Tensor::zeros(&[1, 1, 4, 4]);
        let av = tape.leaf(a);
        let bv = tape.leaf(b);
        let l = tape.smooth_l1_mean(av, bv).unwrap();
        assert!((tape.value(l).item() - 0.125 / n).abs() < 1e-15);

        // single pixel at delta 2: (2 - 0.5) / n
        let mut a = Tensor::zeros(&[1, 1, 4, 4]);
        a.data_mut()[7] = 2.0;
        let av = tape.leaf(a);
        let l = tape.smooth_l1_mean(av, bv).unwrap();
        assert!((tape.value(l).item() - 1.5 / n).abs() < 1e-15);

        // symmetric in its arguments, zero at equality
        let x = tape.leaf(random(&[8], 22, -2.0, 2.0));
        let y = tape.leaf(random(&[8], 23, -2.0, 2.0));
        let xy = tape.smooth_l1_mean(x, y).unwrap();
        let yx = tape.smooth_l1_mean(y, x).unwrap();
        assert_eq!(tape.value(xy).item(), tape.value(yx).item());
        let xx = tape.smooth_l1_mean(x, x).unwrap();
        assert_eq!(tape.value(xx).item(), 0.0);
    }

    #[test]
    fn neg_log_losses_hand_values() {
        let mut tape = Tape::new();
        let s = tape.leaf(t(&[1, 1], &[0.5]));
        let l = tape.neg_log_sum(s);
        assert!((tape.value(l).item() - core::f64::consts::LN_2).abs() < 1e-12);

        let s2 = tape.leaf(t(&[2, 1], &[0.5, 0.5]));
        let l2 = tape.neg_log_sum(s2);
        assert!((tape.value(l2).item() - 2.0 * core::f64::consts::LN_2).abs() < 1e-12);

        // fooled discriminator: scores at the clamp edge cost ~0
        let s3 = tape.leaf(t(&[2, 1], &[1.0 - 1e-7, 1.0 - 1e-7]));
        let l3 = tape.neg_log_sum(s3);
        assert!(tape.value(l3).item().abs() < 1e-6);

        // perfect discriminator: real ~1, fake ~0
        let real = tape.leaf(t(&[1, 1], &[1.0 - 1e-7]));
        let fake = tape.leaf(t(&[1, 1], &[1e-7]));
        let lr = tape.neg_log_sum(real);
        let lf = tape.neg_log_one_minus_sum(fake);
        let ld = tape.add(lr, lf).unwrap();
        assert!(tape.value(ld).item().abs() < 1e-6);
    }

    // ── gradient checks for every op ────────────────────────────────

    fn check<F>(name: &str, f: F, x: &Tensor)
    where
        F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
    {
        let err = grad_check(f, x, 1e-5).unwrap();
        assert!(err < 1e-4, "{name}: max relative error {err}");
    }

    /// Weighted sum against a fixed random tensor so the incoming
    /// gradient is non-uniform.
    fn weighted_sum(tape: &mut Tape, y: TensorId, seed: u64) -> Result<TensorId> {
        let shape = tape.value(y).shape().to_vec();
        let r = tape.constant(random(&shape, seed, -1.0, 1.0));
        let m = tape.mul(y, r)?;
        Ok(tape.sum_all(m))
    }

    #[test]
    fn gradcheck_conv2d_all_inputs() {
        let x0 = random(&[2, 3, 6, 6], 30, -1.0, 1.0);
        let w0 = random(&[4, 3, 3, 3], 31, -0.5, 0.5);
        let b0 = random(&[4], 32, -0.2, 0.2);
        check("conv2d/x", |tape, x| {
            let w = tape.constant(w0.clone());
            let b = tape.constant(b0.clone());
            let y = tape.conv2d(x, w, b, 1, 1)?;
            weighted_sum(tape, y, 33)
        }, &x0);
        check("conv2d/w", |tape, w| {
            let x = tape.constant(x0.clone());
            let b = tape.constant(b0.clone());
            let y = tape.conv2d(x, w, b, 1, 1)?;
            weighted_sum(tape, y, 34)
        }, &w0);
        check("conv2d/b", |tape, b| {
            let x = tape.constant(x0.clone());
            let w = tape.constant(w0.clone());
            let y = tape.conv2d(x, w, b, 1, 1)?;
            weighted_sum(tape, y, 35)
        }, &b0);
        // strided, asymmetric padding (the discriminator configuration)
        let xs = random(&[1, 2, 8, 8], 36, -1.0, 1.0);
        check("conv2d/strided", |tape, x| {
            let w = tape.constant(w0.clone());
            let b = tape.constant(b0.clone());
            let _ = (&w, &b);
            let w2 = tape.constant(random(&[3, 2, 3, 3], 37, -0.5, 0.5));
            let b2 = tape.constant(random(&[3], 38, -0.2, 0.2));
            let y = tape.conv2d_padded(x, w2, b2, 2, [0, 1, 0, 1])?;
            weighted_sum(tape, y, 39)
        }, &xs);
    }

    #[test]
    fn gradcheck_convt_all_inputs() {
        let x0 = random(&[2, 3, 3, 3], 40, -1.0, 1.0);
        let w0 = random(&[3, 4, 2, 2], 41, -0.5, 0.5);
        let b0 = random(&[4], 42, -0.2, 0.2);
        check("conv2d_transpose/x", |tape, x| {
            let w = tape.constant(w0.clone());
            let b = tape.constant(b0.clone());
            let y = tape.conv2d_transpose(x, w, b, 2)?;
            weighted_sum(tape, y, 43)
        }, &x0);
        check("conv2d_transpose/w", |tape, w| {
            let x = tape.constant(x0.clone());
            let b = tape.constant(b0.clone());
            let y = tape.conv2d_transpose(x, w, b, 2)?;
            weighted_sum(tape, y, 44)
        }, &w0);
        check("conv2d_transpose/b", |tape, b| {
            let x = tape.constant(x0.clone());
            let w = tape.constant(w0.clone());
            let y = tape.conv2d_transpose(x, w, b, 2)?;
            weighted_sum(tape, y, 45)
        }, &b0);
    }

    #[test]
    fn gradcheck_pool_and_pointwise() {
        check("maxpool2d", |tape, x| {
            let y = tape.maxpool2d(x)?;
            weighted_sum(tape, y, 46)
        }, &random(&[2, 2, 4, 4], 47, -1.0, 1.0));
        check("leaky_relu", |tape, x| {
            let y = tape.leaky_relu(x, 0.2);
            weighted_sum(tape, y, 48)
        }, &random(&[3, 5], 49, -2.0, 2.0));
        check("relu", |tape, x| {
            let y = tape.relu(x);
            weighted_sum(tape, y, 50)
        }, &random(&[3, 5], 51, -2.0, 2.0));
        check("sigmoid", |tape, x| {
            let y = tape.sigmoid(x);
            weighted_sum(tape, y, 52)
        }, &random(&[3, 5], 53, -3.0, 3.0));
        check("scale", |tape, x| {
            let y = tape.scale(x, -1.7);
            weighted_sum(tape, y, 54)
        }, &random(&[7], 55, -1.0, 1.0));
        check("mean_all", |tape, x| Ok(tape.mean_all(x)), &random(&[6], 56, -1.0, 1.0));
    }

    #[test]
    fn gradcheck_norms() {
        let g3 = random(&[3], 60, 0.5, 1.5);
        let b3 = random(&[3], 61, -0.5, 0.5);
        let x0 = random(&[2, 3, 4, 4], 62, -1.5, 1.5);
        check("instance_norm/x", |tape, x| {
            let g = tape.constant(g3.clone());
            let b = tape.constant(b3.clone());
            let y = tape.instance_norm(x, g, b, 1e-5)?;
            weighted_sum(tape, y, 63)
        }, &x0);
        check("instance_norm/gamma", |tape, g| {
            let x = tape.constant(x0.clone());
            let b = tape.constant(b3.clone());
            let y = tape.instance_norm(x, g, b, 1e-5)?;
            weighted_sum(tape, y, 64)
        }, &g3);
        check("instance_norm/beta", |tape, b| {
            let x = tape.constant(x0.clone());
            let g = tape.constant(g3.clone());
            let y = tape.instance_norm(x, g, b, 1e-5)?;
            weighted_sum(tape, y, 65)
        }, &b3);

        check("batch_norm/x", |tape, x| {
            let g = tape.constant(g3.clone());
            let b = tape.constant(b3.clone());
            let mut stats = BnStats::new(3);
            let y = tape.batch_norm(x, g, b, &mut stats, 0.1, 1e-5, true)?;
            weighted_sum(tape, y, 66)
        }, &x0);
        check("batch_norm/gamma", |tape, g| {
            let x = tape.constant(x0.clone());
            let b = tape.constant(b3.clone());
            let mut stats = BnStats::new(3);
            let y = tape.batch_norm(x, g, b, &mut stats, 0.1, 1e-5, true)?;
            weighted_sum(tape, y, 67)
        }, &g3);
        // inference mode is a plain affine in x
        check("batch_norm/inference", |tape, x| {
            let g = tape.constant(g3.clone());
            let b = tape.constant(b3.clone());
            let mut stats = BnStats::new(3);
            stats.mean = alloc::vec![0.3, -0.2, 0.1];
            stats.var = alloc::vec![0.9, 1.2, 0.7];
            stats.updates = 1;
            let y = tape.batch_norm(x, g, b, &mut stats, 0.1, 1e-5, false)?;
            weighted_sum(tape, y, 68)
        }, &x0);

        let gk = random(&[8], 69, 0.5, 1.5);
        let bk = random(&[8], 70, -0.5, 0.5);
        let xk = random(&[3, 8], 71, -1.5, 1.5);
        check("layer_norm/x", |tape, x| {
            let g = tape.constant(gk.clone());
            let b = tape.constant(bk.clone());
            let y = tape.layer_norm(x, g, b, 1e-5)?;
            weighted_sum(tape, y, 72)
        }, &xk);
        check("layer_norm/gamma", |tape, g| {
            let x = tape.constant(xk.clone());
            let b = tape.constant(bk.clone());
            let y = tape.layer_norm(x, g, b, 1e-5)?;
            weighted_sum(tape, y, 73)
        }, &gk);
    }

    #[test]
    fn gradcheck_linear_and_reductions() {
        let x0 = random(&[3, 4], 80, -1.0, 1.0);
        let w0 = random(&[2, 4], 81, -0.5, 0.5);
        let b0 = random(&[2], 82, -0.2, 0.2);
        check("linear/x", |tape, x| {
            let w = tape.constant(w0.clone());
            let b = tape.constant(b0.clone());
            let y = tape.linear(x, w, b)?;
            weighted_sum(tape, y, 83)
        }, &x0);
        check("linear/w", |tape, w| {
            let x = tape.constant(x0.clone());
            let b = tape.constant(b0.clone());
            let y = tape.linear(x, w, b)?;
            weighted_sum(tape, y, 84)
        }, &w0);
        check("linear/b", |tape, b| {
            let x = tape.constant(x0.clone());
            let w = tape.constant(w0.clone());
            let y = tape.linear(x, w, b)?;
            weighted_sum(tape, y, 85)
        }, &b0);
        check("global_avg_pool", |tape, x| {
            let y = tape.global_avg_pool(x)?;
            weighted_sum(tape, y, 86)
        }, &random(&[2, 3, 4, 4], 87, -1.0, 1.0));
    }

    #[test]
    fn gradcheck_attention_ops() {
        check("softmax_spatial", |tape, x| {
            let y = tape.softmax_spatial(x)?;
            weighted_sum(tape, y, 90)
        }, &random(&[2, 1, 3, 3], 91, -2.0, 2.0));
        let x0 = random(&[2, 3, 3, 3], 92, -1.0, 1.0);
        let a0 = random(&[2, 1, 3, 3], 93, 0.1, 0.9);
        check("mul_spatial_attn/x", |tape, x| {
            let a = tape.constant(a0.clone());
            let y = tape.mul_spatial_attn(x, a)?;
            weighted_sum(tape, y, 94)
        }, &x0);
        check("mul_spatial_attn/attn", |tape, a| {
            let x = tape.constant(x0.clone());
            let y = tape.mul_spatial_attn(x, a)?;
            weighted_sum(tape, y, 95)
        }, &a0);
        check("sum_spatial", |tape, x| {
            let y = tape.sum_spatial(x)?;
            weighted_sum(tape, y, 96)
        }, &x0);
        let v0 = random(&[2, 3, 1, 1], 97, -1.0, 1.0);
        check("add_broadcast_spatial/x", |tape, x| {
            let v = tape.constant(v0.clone());
            let y = tape.add_broadcast_spatial(x, v)?;
            weighted_sum(tape, y, 98)
        }, &x0);
        check("add_broadcast_spatial/v", |tape, v| {
            let x = tape.constant(x0.clone());
            let y = tape.add_broadcast_spatial(x, v)?;
            weighted_sum(tape, y, 99)
        }, &v0);
        check("concat_channels", |tape, a| {
            let b = tape.constant(random(&[2, 2, 3, 3], 100, -1.0, 1.0));
            let y = tape.concat_channels(a, b)?;
            weighted_sum(tape, y, 101)
        }, &x0);
    }

    #[test]
    fn gradcheck_losses() {
        let t0 = random(&[2, 1, 4, 4], 110, 0.0, 1.0);
        check("mse_mean", |tape, x| {
            let t_ = tape.constant(t0.clone());
            tape.mse_mean(x, t_)
        }, &random(&[2, 1, 4, 4], 111, 0.0, 1.0));
        // quadratic branch: differences all inside the unit band
        check("smooth_l1/quadratic", |tape, x| {
            let t_ = tape.constant(t0.clone());
            tape.smooth_l1_mean(x, t_)
        }, &random(&[2, 1, 4, 4], 112, 0.0, 0.9));
        // linear branch: differences all far outside it
        check("smooth_l1/linear", |tape, x| {
            let t_ = tape.constant(Tensor::zeros(&[8]));
            tape.smooth_l1_mean(x, t_)
        }, &random(&[8], 113, 2.0, 5.0));
        check("neg_log_sum", |tape, s| Ok(tape.neg_log_sum(s)), &random(&[4, 1], 114, 0.1, 0.9));
        check(
            "neg_log_one_minus_sum",
            |tape, s| Ok(tape.neg_log_one_minus_sum(s)),
            &random(&[4, 1], 115, 0.1, 0.9),
        );
        check("add", |tape, a| {
            let b = tape.constant(random(&[5], 116, -1.0, 1.0));
            let y = tape.add(a, b)?;
            weighted_sum(tape, y, 117)
        }, &random(&[5], 118, -1.0, 1.0));
        check("sub", |tape, a| {
            let b = tape.constant(random(&[5], 119, -1.0, 1.0));
            let y = tape.sub(a, b)?;
            weighted_sum(tape, y, 120)
        }, &random(&[5], 121, -1.0, 1.0));
        check("mul", |tape, a| {
            let b = tape.constant(random(&[5], 122, -1.0, 1.0));
            let y = tape.mul(a, b)?;
            weighted_sum(tape, y, 123)
        }, &random(&[5], 124, -1.0, 1.0));
    }
}
