//! The generator (attention-augmented U-Net) and the discriminator
//! (8-layer CNN with a fully-connected head).
//!
//! Parameters live in the model structs as plain tensors. A forward pass
//! first binds them onto a tape (`bind`), which yields an id mirror of
//! the model; the same binding can then drive any number of forwards on
//! that tape, so the discriminator sees real and generated batches
//! through one set of leaves and its gradients accumulate across both.
//!
//! Traversal order is the contract: `named_params`, `params_mut`, `bind`
//! and `Ids::collect` all walk the same structure in the same order, and
//! checkpoints, Adam state and gradient extraction rely on that.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{BnStats, Tape, TensorId};
use crate::tensor::Tensor;

pub const LRELU_ALPHA: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Bottleneck ratio of the global-context block; blocks narrower than
/// the ratio keep a single bottleneck channel.
pub const GC_RATIO: usize = 8;
/// Initial bias of the output head; sigmoid(-3) starts the output near
/// the dark background instead of mid-gray, where the sigmoid tail is
/// otherwise slow to reach.
pub const HEAD_BIAS_PRIOR: f64 = -4.0;

/// Base filter counts, scaled by [`Scale`] at build time.
pub const GEN_ENCODER_FILTERS: [usize; 5] = [32, 64, 128, 256, 512];
pub const GEN_DECODER_FILTERS: [usize; 4] = [256, 128, 64, 32];
pub const DISC_FILTERS: [usize; 8] = [64, 64, 128, 128, 256, 256, 512, 512];
pub const DISC_STRIDES: [usize; 8] = [1, 2, 1, 2, 1, 2, 1, 2];
pub const DISC_FC_HIDDEN: usize = 1024;

// ── Architecture scale ──────────────────────────────────────────────

/// Desk-scale shrink factor applied to every filter count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Full,
    Half,
    Quarter,
    Eighth,
}

impl Scale {
    pub fn denominator(self) -> usize {
        match self {
            Scale::Full => 1,
            Scale::Half => 2,
            Scale::Quarter => 4,
            Scale::Eighth => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Full => "1",
            Scale::Half => "1/2",
            Scale::Quarter => "1/4",
            Scale::Eighth => "1/8",
        }
    }

    pub fn parse(s: &str) -> Result<Scale> {
        match s.trim() {
            "1" | "1/1" => Ok(Scale::Full),
            "1/2" => Ok(Scale::Half),
            "1/4" => Ok(Scale::Quarter),
            "1/8" => Ok(Scale::Eighth),
            other => Err(Error::Config(format!(
                "scale {other:?} not in {{1, 1/2, 1/4, 1/8}}"
            ))),
        }
    }

    pub fn apply(self, base: usize) -> Result<usize> {
        let d = self.denominator();
        if base % d != 0 {
            return Err(Error::Config(format!(
                "scale 1/{d} gives a non-integer channel count for {base} filters"
            )));
        }
        Ok(base / d)
    }
}

// ── Parameter leaves ────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvIds {
    pub w: TensorId,
    pub b: TensorId,
}

impl ConvParams {
    pub(crate) fn he_conv(rng: &mut Rng, out_c: usize, in_c: usize, kh: usize, kw: usize) -> ConvParams {
        ConvParams {
            weight: he_uniform(rng, &[out_c, in_c, kh, kw], in_c * kh * kw),
            bias: Tensor::zeros(&[out_c]),
        }
    }

    /// Transposed-conv weights, layout (in_c, out_c, k, k); each output
    /// position receives in_c contributions, so that is the fan-in.
    fn he_convt(rng: &mut Rng, in_c: usize, out_c: usize, k: usize) -> ConvParams {
        ConvParams {
            weight: he_uniform(rng, &[in_c, out_c, k, k], in_c),
            bias: Tensor::zeros(&[out_c]),
        }
    }

    fn he_dense(rng: &mut Rng, out_f: usize, in_f: usize) -> ConvParams {
        ConvParams {
            weight: he_uniform(rng, &[out_f, in_f], in_f),
            bias: Tensor::zeros(&[out_f]),
        }
    }

    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{name}.weight"), &self.weight));
        out.push((format!("{name}.bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }

    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> ConvIds {
        ConvIds {
            w: bind_one(tape, &self.weight, trainable),
            b: bind_one(tape, &self.bias, trainable),
        }
    }
}

impl ConvIds {
    fn collect(&self, out: &mut Vec<TensorId>) {
        out.push(self.w);
        out.push(self.b);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct AffineIds {
    pub g: TensorId,
    pub b: TensorId,
}

impl AffineParams {
    fn identity(len: usize) -> AffineParams {
        AffineParams {
            gamma: Tensor::filled(&[len], 1.0),
            beta: Tensor::zeros(&[len]),
        }
    }

    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{name}.gamma"), &self.gamma));
        out.push((format!("{name}.beta"), &self.beta));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> AffineIds {
        AffineIds {
            g: bind_one(tape, &self.gamma, trainable),
            b: bind_one(tape, &self.beta, trainable),
        }
    }
}

impl AffineIds {
    fn collect(&self, out: &mut Vec<TensorId>) {
        out.push(self.g);
        out.push(self.b);
    }
}

fn bind_one(tape: &mut Tape, t: &Tensor, trainable: bool) -> TensorId {
    if trainable {
        tape.leaf(t.clone().with_grad())
    } else {
        tape.constant(t.clone())
    }
}

/// He-style fan-in scaled uniform init: U(-b, b) with b = sqrt(6/fan_in).
fn he_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = libm::sqrt(6.0 / fan_in as f64);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.range(-bound, bound)).collect()).unwrap()
}

// ── Standard unit block ─────────────────────────────────────────────

/// Two 3x3 same-padding convolutions, each followed by instance
/// normalization and a leaky ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitBlock {
    pub conv1: ConvParams,
    pub norm1: AffineParams,
    pub conv2: ConvParams,
    pub norm2: AffineParams,
    pub filters: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct UnitBlockIds {
    conv1: ConvIds,
    norm1: AffineIds,
    conv2: ConvIds,
    norm2: AffineIds,
}

impl UnitBlock {
    fn new(rng: &mut Rng, in_c: usize, filters: usize) -> UnitBlock {
        UnitBlock {
            conv1: ConvParams::he_conv(rng, filters, in_c, 3, 3),
            norm1: AffineParams::identity(filters),
            conv2: ConvParams::he_conv(rng, filters, filters, 3, 3),
            norm2: AffineParams::identity(filters),
            filters,
        }
    }

    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.conv1.visit(&format!("{name}.conv1"), out);
        self.norm1.visit(&format!("{name}.norm1"), out);
        self.conv2.visit(&format!("{name}.conv2"), out);
        self.norm2.visit(&format!("{name}.norm2"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.conv1.visit_mut(out);
        self.norm1.visit_mut(out);
        self.conv2.visit_mut(out);
        self.norm2.visit_mut(out);
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> UnitBlockIds {
        UnitBlockIds {
            conv1: self.conv1.bind(tape, trainable),
            norm1: self.norm1.bind(tape, trainable),
            conv2: self.conv2.bind(tape, trainable),
            norm2: self.norm2.bind(tape, trainable),
        }
    }

    fn forward(tape: &mut Tape, ids: &UnitBlockIds, x: TensorId) -> Result<TensorId> {
        let c1 = tape.conv2d(x, ids.conv1.w, ids.conv1.b, 1, 1)?;
        let n1 = tape.instance_norm(c1, ids.norm1.g, ids.norm1.b, NORM_EPS)?;
        let a1 = tape.leaky_relu(n1, LRELU_ALPHA);
        let c2 = tape.conv2d(a1, ids.conv2.w, ids.conv2.b, 1, 1)?;
        let n2 = tape.instance_norm(c2, ids.norm2.g, ids.norm2.b, NORM_EPS)?;
        Ok(tape.leaky_relu(n2, LRELU_ALPHA))
    }
}

impl UnitBlockIds {
    fn collect(&self, out: &mut Vec<TensorId>) {
        self.conv1.collect(out);
        self.norm1.collect(out);
        self.conv2.collect(out);
        self.norm2.collect(out);
    }
}

// ── Global-context block ────────────────────────────────────────────

/// Softmax spatial attention pools a per-sample context vector, which is
/// squeezed through a 1x1 bottleneck (layer norm + ReLU inside) and added
/// back to every position.
#[derive(Debug, Clone, PartialEq)]
pub struct GcBlock {
    pub context: ConvParams,
    pub reduce: ConvParams,
    pub norm: AffineParams,
    pub expand: ConvParams,
    pub channels: usize,
    pub bottleneck: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GcBlockIds {
    context: ConvIds,
    reduce: ConvIds,
    norm: AffineIds,
    expand: ConvIds,
}

impl GcBlock {
    fn new(rng: &mut Rng, channels: usize) -> GcBlock {
        let bottleneck = (channels / GC_RATIO).max(1);
        // the fusion conv starts at zero so the block begins as identity
        GcBlock {
            context: ConvParams::he_conv(rng, 1, channels, 1, 1),
            reduce: ConvParams::he_conv(rng, bottleneck, channels, 1, 1),
            norm: AffineParams::identity(bottleneck),
            expand: ConvParams {
                weight: Tensor::zeros(&[channels, bottleneck, 1, 1]),
                bias: Tensor::zeros(&[channels]),
            },
            channels,
            bottleneck,
        }
    }

    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.context.visit(&format!("{name}.context"), out);
        self.reduce.visit(&format!("{name}.reduce"), out);
        self.norm.visit(&format!("{name}.norm"), out);
        self.expand.visit(&format!("{name}.expand"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.context.visit_mut(out);
        self.reduce.visit_mut(out);
        self.norm.visit_mut(out);
        self.expand.visit_mut(out);
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> GcBlockIds {
        GcBlockIds {
            context: self.context.bind(tape, trainable),
            reduce: self.reduce.bind(tape, trainable),
            norm: self.norm.bind(tape, trainable),
            expand: self.expand.bind(tape, trainable),
        }
    }

    pub fn forward(tape: &mut Tape, ids: &GcBlockIds, x: TensorId) -> Result<TensorId> {
        let logits = tape.conv2d(x, ids.context.w, ids.context.b, 1, 0)?;
        let attn = tape.softmax_spatial(logits)?;
        let weighted = tape.mul_spatial_attn(x, attn)?;
        let context = tape.sum_spatial(weighted)?;
        let red = tape.conv2d(context, ids.reduce.w, ids.reduce.b, 1, 0)?;
        let nrm = tape.layer_norm(red, ids.norm.g, ids.norm.b, NORM_EPS)?;
        let act = tape.relu(nrm);
        let exp = tape.conv2d(act, ids.expand.w, ids.expand.b, 1, 0)?;
        tape.add_broadcast_spatial(x, exp)
    }
}

impl GcBlockIds {
    fn collect(&self, out: &mut Vec<TensorId>) {
        self.context.collect(out);
        self.reduce.collect(out);
        self.norm.collect(out);
        self.expand.collect(out);
    }
}

// ── Generator ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub encoder: Vec<UnitBlock>,
    pub gc: Vec<GcBlock>,
    pub up: Vec<ConvParams>,
    pub decoder: Vec<UnitBlock>,
    pub head: ConvParams,
    pub scale: Scale,
    pub seed: u64,
}

pub struct GeneratorIds {
    encoder: Vec<UnitBlockIds>,
    gc: Vec<GcBlockIds>,
    up: Vec<ConvIds>,
    decoder: Vec<UnitBlockIds>,
    head: ConvIds,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorInventory {
    pub unit_block_filters: Vec<usize>,
    pub gc_blocks: usize,
    pub max_pools: usize,
    pub transposed_convs: usize,
}

impl Generator {
    pub fn build(seed: u64, scale: Scale) -> Result<Generator> {
        Generator::build_custom(seed, scale, true)
    }

    /// `with_gc: false` drops the attention blocks, the ablation the
    /// paper compares against; everything else is unchanged.
    pub fn build_custom(seed: u64, scale: Scale, with_gc: bool) -> Result<Generator> {
        let mut rng = Rng::substream(seed, 0x47454e); // generator stream
        let enc_filters: Vec<usize> = GEN_ENCODER_FILTERS
            .iter()
            .map(|&f| scale.apply(f))
            .collect::<Result<_>>()?;
        let dec_filters: Vec<usize> = GEN_DECODER_FILTERS
            .iter()
            .map(|&f| scale.apply(f))
            .collect::<Result<_>>()?;

        let mut encoder = Vec::with_capacity(5);
        let mut gc = Vec::with_capacity(5);
        let mut in_c = 1;
        for &f in &enc_filters {
            encoder.push(UnitBlock::new(&mut rng, in_c, f));
            if with_gc {
                gc.push(GcBlock::new(&mut rng, f));
            }
            in_c = f;
        }

        let mut up = Vec::with_capacity(4);
        let mut decoder = Vec::with_capacity(4);
        let mut cur = enc_filters[4];
        for (j, &f) in dec_filters.iter().enumerate() {
            up.push(ConvParams::he_convt(&mut rng, cur, f, 2));
            // decoder blocks see the up-sampled features concatenated
            // with the matching encoder skip
            let skip = enc_filters[3 - j];
            decoder.push(UnitBlock::new(&mut rng, f + skip, f));
            cur = f;
        }

        let mut head = ConvParams::he_conv(&mut rng, 1, dec_filters[3], 1, 1);
        head.bias.data_mut()[0] = HEAD_BIAS_PRIOR;
        Ok(Generator { encoder, gc, up, decoder, head, scale, seed })
    }

    pub fn inventory(&self) -> GeneratorInventory {
        let mut unit_block_filters: Vec<usize> =
            self.encoder.iter().map(|b| b.filters).collect();
        unit_block_filters.extend(self.decoder.iter().map(|b| b.filters));
        GeneratorInventory {
            unit_block_filters,
            gc_blocks: self.gc.len(),
            max_pools: 4,
            transposed_convs: self.up.len(),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit(&format!("enc{i}"), &mut out);
        }
        for (i, b) in self.gc.iter().enumerate() {
            b.visit(&format!("gc{i}"), &mut out);
        }
        for (j, u) in self.up.iter().enumerate() {
            u.visit(&format!("up{j}"), &mut out);
        }
        for (j, b) in self.decoder.iter().enumerate() {
            b.visit(&format!("dec{j}"), &mut out);
        }
        self.head.visit("head", &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.encoder {
            b.visit_mut(&mut out);
        }
        for b in &mut self.gc {
            b.visit_mut(&mut out);
        }
        for u in &mut self.up {
            u.visit_mut(&mut out);
        }
        for b in &mut self.decoder {
            b.visit_mut(&mut out);
        }
        self.head.visit_mut(&mut out);
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> GeneratorIds {
        GeneratorIds {
            encoder: self.encoder.iter().map(|b| b.bind(tape, trainable)).collect(),
            gc: self.gc.iter().map(|b| b.bind(tape, trainable)).collect(),
            up: self.up.iter().map(|u| u.bind(tape, trainable)).collect(),
            decoder: self.decoder.iter().map(|b| b.bind(tape, trainable)).collect(),
            head: self.head.bind(tape, trainable),
        }
    }

    /// Map a noisy (N, 1, H, W) batch to its de-noised estimate of the
    /// same shape. H and W must be divisible by 16 (four pooling stages).
    pub fn forward(&self, tape: &mut Tape, ids: &GeneratorIds, x: TensorId) -> Result<TensorId> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::Dim(format!(
                "generator wants (N, 1, H, W) input, got {shape:?}"
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Dim(format!(
                "generator input {h}x{w} not divisible by 16"
            )));
        }

        let mut skips = Vec::with_capacity(4);
        let mut cur = x;
        for i in 0..5 {
            cur = UnitBlock::forward(tape, &ids.encoder[i], cur)?;
            if let Some(gc_ids) = ids.gc.get(i) {
                cur = GcBlock::forward(tape, gc_ids, cur)?;
            }
            if i < 4 {
                skips.push(cur);
                cur = tape.maxpool2d(cur)?;
            }
        }
        for j in 0..4 {
            cur = tape.conv2d_transpose(cur, ids.up[j].w, ids.up[j].b, 2)?;
            cur = tape.concat_channels(cur, skips[3 - j])?;
            cur = UnitBlock::forward(tape, &ids.decoder[j], cur)?;
        }
        let logits = tape.conv2d(cur, ids.head.w, ids.head.b, 1, 0)?;
        Ok(tape.sigmoid(logits))
    }

    /// Inference convenience: run one batch on a throwaway tape.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let ids = self.bind(&mut tape, false);
        let xid = tape.constant(x.clone());
        let y = self.forward(&mut tape, &ids, xid)?;
        Ok(tape.value(y).clone())
    }

    pub fn params_hash(&self) -> u64 {
        hash_params(self.named_params())
    }

    pub fn with_gc(&self) -> bool {
        !self.gc.is_empty()
    }
}

impl GeneratorIds {
    pub fn collect(&self) -> Vec<TensorId> {
        let mut out = Vec::new();
        for b in &self.encoder {
            b.collect(&mut out);
        }
        for b in &self.gc {
            b.collect(&mut out);
        }
        for u in &self.up {
            u.collect(&mut out);
        }
        for b in &self.decoder {
            b.collect(&mut out);
        }
        self.head.collect(&mut out);
        out
    }
}

// ── Discriminator ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct DiscLayer {
    pub conv: ConvParams,
    pub bn: AffineParams,
    pub stats: BnStats,
    pub stride: usize,
    pub filters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub layers: Vec<DiscLayer>,
    pub fc1: ConvParams,
    pub fc2: ConvParams,
    pub scale: Scale,
    pub seed: u64,
}

pub struct DiscriminatorIds {
    layers: Vec<(ConvIds, AffineIds)>,
    fc1: ConvIds,
    fc2: ConvIds,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscriminatorInventory {
    pub conv_filters: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub fc_dims: Vec<usize>,
}

impl Discriminator {
    pub fn build(seed: u64, scale: Scale) -> Result<Discriminator> {
        let mut rng = Rng::substream(seed, 0x444953); // discriminator stream
        let mut layers = Vec::with_capacity(8);
        let mut in_c = 1;
        for (l, &base) in DISC_FILTERS.iter().enumerate() {
            let f = scale.apply(base)?;
            layers.push(DiscLayer {
                conv: ConvParams::he_conv(&mut rng, f, in_c, 3, 3),
                bn: AffineParams::identity(f),
                stats: BnStats::new(f),
                stride: DISC_STRIDES[l],
                filters: f,
            });
            in_c = f;
        }
        let fc1 = ConvParams::he_dense(&mut rng, DISC_FC_HIDDEN, in_c);
        let fc2 = ConvParams::he_dense(&mut rng, 1, DISC_FC_HIDDEN);
        Ok(Discriminator { layers, fc1, fc2, scale, seed })
    }

    pub fn inventory(&self) -> DiscriminatorInventory {
        DiscriminatorInventory {
            conv_filters: self.layers.iter().map(|l| l.filters).collect(),
            conv_strides: self.layers.iter().map(|l| l.stride).collect(),
            fc_dims: vec![DISC_FC_HIDDEN, 1],
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.conv.visit(&format!("conv{l}"), &mut out);
            layer.bn.visit(&format!("bn{l}"), &mut out);
        }
        self.fc1.visit("fc1", &mut out);
        self.fc2.visit("fc2", &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            layer.conv.visit_mut(&mut out);
            layer.bn.visit_mut(&mut out);
        }
        self.fc1.visit_mut(&mut out);
        self.fc2.visit_mut(&mut out);
        out
    }

    /// Running batch-norm buffers, named the same way as the params.
    pub fn named_buffers(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((
                format!("bn{l}.running_mean"),
                Tensor::from_vec(&[layer.filters], layer.stats.mean.clone()).unwrap(),
            ));
            out.push((
                format!("bn{l}.running_var"),
                Tensor::from_vec(&[layer.filters], layer.stats.var.clone()).unwrap(),
            ));
        }
        out
    }

    pub fn load_buffers(&mut self, buffers: &[(String, Tensor)], updates: u64) -> Result<()> {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let mean_name = format!("bn{l}.running_mean");
            let var_name = format!("bn{l}.running_var");
            let find = |name: &str| {
                buffers
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, t)| t.data().to_vec())
                    .ok_or_else(|| Error::State(format!("missing buffer {name}")))
            };
            let mean = find(&mean_name)?;
            let var = find(&var_name)?;
            if mean.len() != layer.filters || var.len() != layer.filters {
                return Err(Error::Dim(format!(
                    "buffer length for layer {l} does not match {} filters",
                    layer.filters
                )));
            }
            layer.stats.mean = mean;
            layer.stats.var = var;
            layer.stats.updates = updates;
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DiscriminatorIds {
        DiscriminatorIds {
            layers: self
                .layers
                .iter()
                .map(|l| (l.conv.bind(tape, trainable), l.bn.bind(tape, trainable)))
                .collect(),
            fc1: self.fc1.bind(tape, trainable),
            fc2: self.fc2.bind(tape, trainable),
        }
    }

    /// Score a (N, 1, H, W) batch; the result is (N, 1), strictly inside
    /// (0, 1). Training mode normalizes with batch statistics, which
    /// needs at least two samples.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        ids: &DiscriminatorIds,
        x: TensorId,
        training: bool,
    ) -> Result<TensorId> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::Dim(format!(
                "discriminator wants (N, 1, H, W) input, got {shape:?}"
            )));
        }
        if shape[2] % 16 != 0 || shape[3] % 16 != 0 {
            return Err(Error::Dim(format!(
                "discriminator input {}x{} not divisible by 16",
                shape[2], shape[3]
            )));
        }
        if training && shape[0] < 2 {
            return Err(Error::State(
                "discriminator training mode needs batch >= 2 for batch statistics".into(),
            ));
        }
        let mut cur = x;
        for (l, (conv, bn)) in ids.layers.iter().enumerate() {
            let stride = self.layers[l].stride;
            cur = if stride == 1 {
                tape.conv2d(cur, conv.w, conv.b, 1, 1)?
            } else {
                // stride 2 on even extents needs one-sided extra padding
                tape.conv2d_padded(cur, conv.w, conv.b, 2, [0, 1, 0, 1])?
            };
            cur = tape.leaky_relu(cur, LRELU_ALPHA);
            cur = tape.batch_norm(
                cur,
                bn.g,
                bn.b,
                &mut self.layers[l].stats,
                BN_MOMENTUM,
                NORM_EPS,
                training,
            )?;
        }
        let pooled = tape.global_avg_pool(cur)?;
        let h1 = tape.linear(pooled, ids.fc1.w, ids.fc1.b)?;
        let a1 = tape.leaky_relu(h1, LRELU_ALPHA);
        let h2 = tape.linear(a1, ids.fc2.w, ids.fc2.b)?;
        Ok(tape.sigmoid(h2))
    }

    pub fn params_hash(&self) -> u64 {
        hash_params(self.named_params())
    }
}

impl DiscriminatorIds {
    pub fn collect(&self) -> Vec<TensorId> {
        let mut out = Vec::new();
        for (conv, bn) in &self.layers {
            conv.collect(&mut out);
            bn.collect(&mut out);
        }
        self.fc1.collect(&mut out);
        self.fc2.collect(&mut out);
        out
    }
}

fn hash_params(params: Vec<(String, &Tensor)>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for (name, t) in params {
        for b in name.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        h ^= t.content_hash();
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}
