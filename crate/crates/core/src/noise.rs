//! Synthetic data: clean vessel phantoms, their lift into stacks of
//! A-line signals, the three-component noise model (signal-dependent
//! Poisson at conversion, additive Gaussian and Rayleigh at readout),
//! and the maximum-amplitude projection back to 2D.
//!
//! Noise is injected into the A-line domain rather than the projected
//! image, so the noisy image is the MAP of a noisy volume, the same way
//! a noisy acquisition would produce it.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

/// Axial samples per A-line at desk scale.
pub const DEFAULT_DEPTH: usize = 32;
/// Standard deviation of the Gaussian axial pulse, in samples.
pub const DEFAULT_PULSE_SIGMA: f64 = 2.0;

// ── Noise specification ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseLevel {
    Low,
    Mid,
    High,
}

impl NoiseLevel {
    pub const ALL: [NoiseLevel; 3] = [NoiseLevel::Low, NoiseLevel::Mid, NoiseLevel::High];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseLevel::Low => "low",
            NoiseLevel::Mid => "mid",
            NoiseLevel::High => "high",
        }
    }

    pub fn parse(s: &str) -> Result<NoiseLevel> {
        match s.trim() {
            "low" => Ok(NoiseLevel::Low),
            "mid" | "middle" => Ok(NoiseLevel::Mid),
            "high" => Ok(NoiseLevel::High),
            other => Err(Error::Config(format!("unknown noise level {other:?}"))),
        }
    }

    /// The additive Gaussian sigma band for this level, in normalized
    /// amplitude units.
    pub fn gaussian_band(self) -> (f64, f64) {
        match self {
            NoiseLevel::Low => (0.02, 0.06),
            NoiseLevel::Mid => (0.06, 0.15),
            NoiseLevel::High => (0.15, 0.35),
        }
    }
}

/// Parameters of one noise draw. All three components are optional; a
/// zero parameter disables its component entirely.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Additive white Gaussian sigma.
    pub gaussian_sigma: f64,
    /// Photon-count scaling s of the Poisson component; larger is milder.
    pub poisson_scale: f64,
    /// Scale of the additive Rayleigh component.
    pub rayleigh_sigma: f64,
    pub level: NoiseLevel,
}

impl NoiseSpec {
    pub fn zero() -> NoiseSpec {
        NoiseSpec {
            gaussian_sigma: 0.0,
            poisson_scale: 0.0,
            rayleigh_sigma: 0.0,
            level: NoiseLevel::Low,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gaussian_sigma < 0.0 || self.poisson_scale < 0.0 || self.rayleigh_sigma < 0.0 {
            return Err(Error::Config(format!("negative noise parameter in {self:?}")));
        }
        Ok(())
    }
}

/// Draw a spec uniformly from the level's calibrated bands. The Poisson
/// scale shares one band across levels; the Gaussian band carries the
/// level separation and the Rayleigh band sits at a quarter of it.
pub fn sample_noise_spec(level: NoiseLevel, seed: u64) -> NoiseSpec {
    let mut rng = Rng::substream(seed, 0x4e53_5045); // noise-spec stream
    let (lo, hi) = level.gaussian_band();
    NoiseSpec {
        gaussian_sigma: rng.range(lo, hi),
        rayleigh_sigma: rng.range(lo / 4.0, hi / 4.0),
        poisson_scale: rng.range(200.0, 2000.0),
        level,
    }
}

// ── Phantom generation ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhantomKind {
    Veins,
    Vessels,
}

impl PhantomKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PhantomKind::Veins => "veins",
            PhantomKind::Vessels => "vessels",
        }
    }

    pub fn parse(s: &str) -> Result<PhantomKind> {
        match s.trim() {
            "veins" => Ok(PhantomKind::Veins),
            "vessels" => Ok(PhantomKind::Vessels),
            other => Err(Error::Config(format!("unknown phantom kind {other:?}"))),
        }
    }
}

/// Recipe for one synthetic clean image: branching curvilinear
/// structures drawn as tapering random walks on a black background.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub height: usize,
    pub width: usize,
    pub branch_count: usize,
    /// Std of the per-step heading change, radians.
    pub wander: f64,
    /// Stroke half-width range at the branch root, pixels.
    pub thickness: (f64, f64),
    pub seed: u64,
}

impl PhantomSpec {
    pub fn veins(height: usize, width: usize, seed: u64) -> PhantomSpec {
        let area = (height * width) as f64;
        PhantomSpec {
            kind: PhantomKind::Veins,
            height,
            width,
            branch_count: ((area / 6500.0) as usize).max(3),
            wander: 0.16,
            thickness: (1.6, 3.6),
            seed,
        }
    }

    pub fn vessels(height: usize, width: usize, seed: u64) -> PhantomSpec {
        let area = (height * width) as f64;
        PhantomSpec {
            kind: PhantomKind::Vessels,
            height,
            width,
            branch_count: ((area / 3200.0) as usize).max(5),
            wander: 0.32,
            thickness: (0.9, 2.0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config(format!(
                "phantom size {}x{} below the 32-pixel minimum",
                self.height, self.width
            )));
        }
        if !(self.thickness.0 > 0.0 && self.thickness.1 >= self.thickness.0) {
            return Err(Error::Config(format!("bad thickness range {:?}", self.thickness)));
        }
        Ok(())
    }
}

struct Branch {
    x: f64,
    y: f64,
    heading: f64,
    length: usize,
    root_width: f64,
    tip_width: f64,
    intensity: f64,
    depth: u8,
}

/// Draw one clean phantom in [0, 1]. Deterministic per spec. Rejects
/// results whose foreground (> 0.1) covers less than 1% of the image.
pub fn gen_phantom(spec: &PhantomSpec) -> Result<Tensor> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut img = vec![0.0f64; h * w];
    let mut rng = Rng::substream(spec.seed, 0x5048414e); // phantom stream
    let span = h.min(w) as f64;
    let branch_prob = match spec.kind {
        PhantomKind::Veins => 0.020,
        PhantomKind::Vessels => 0.035,
    };

    let mut queue: Vec<Branch> = Vec::new();
    for _ in 0..spec.branch_count {
        let x = rng.range(0.1 * w as f64, 0.9 * w as f64);
        let y = rng.range(0.1 * h as f64, 0.9 * h as f64);
        let heading = rng.range(0.0, 2.0 * core::f64::consts::PI);
        let length = (span * rng.range(0.5, 1.1)) as usize;
        let root_width = rng.range(spec.thickness.0, spec.thickness.1);
        queue.push(Branch {
            x,
            y,
            heading,
            length,
            root_width,
            tip_width: root_width * rng.range(0.25, 0.5),
            intensity: rng.range(0.65, 1.0),
            depth: 0,
        });
    }

    let mut qi = 0;
    while qi < queue.len() {
        let b = Branch { ..queue[qi] };
        let (mut x, mut y, mut heading) = (b.x, b.y, b.heading);
        for step in 0..b.length {
            let t = step as f64 / b.length.max(1) as f64;
            let radius = b.root_width * (1.0 - t) + b.tip_width * t;
            let jitter = 1.0 + 0.12 * rng.normal();
            let v = (b.intensity * jitter).clamp(0.25, 1.0);
            stamp_disc(&mut img, h, w, x, y, radius, v);
            heading += spec.wander * rng.normal();
            x += libm::cos(heading);
            y += libm::sin(heading);
            if x < 1.0 || y < 1.0 || x > (w - 2) as f64 || y > (h - 2) as f64 {
                break;
            }
            let remaining = b.length - step;
            if b.depth < 2 && remaining > 8 && rng.uniform() < branch_prob {
                let side = if rng.uniform() < 0.5 { 1.0 } else { -1.0 };
                let child_width = (radius * rng.range(0.55, 0.85)).max(0.6);
                queue.push(Branch {
                    x,
                    y,
                    heading: heading + side * rng.range(0.4, 1.1),
                    length: (remaining as f64 * rng.range(0.5, 0.9)) as usize,
                    root_width: child_width,
                    tip_width: child_width * rng.range(0.3, 0.6),
                    intensity: (b.intensity * rng.range(0.85, 1.05)).clamp(0.25, 1.0),
                    depth: b.depth + 1,
                });
            }
        }
        qi += 1;
    }

    let foreground = img.iter().filter(|&&v| v > 0.1).count();
    if (foreground as f64) < 0.01 * (h * w) as f64 {
        return Err(Error::Config(format!(
            "phantom foreground {foreground} px is below 1% of {}x{}",
            h, w
        )));
    }
    Tensor::from_vec(&[h, w], img)
}

/// Max-blend an anti-aliased disc; intensity falls off linearly over the
/// final pixel of the radius.
fn stamp_disc(img: &mut [f64], h: usize, w: usize, cx: f64, cy: f64, radius: f64, v: f64) {
    let r_out = radius + 0.5;
    let x_lo = libm::floor(cx - r_out).max(0.0) as usize;
    let x_hi = libm::ceil(cx + r_out).min((w - 1) as f64) as usize;
    let y_lo = libm::floor(cy - r_out).max(0.0) as usize;
    let y_hi = libm::ceil(cy + r_out).min((h - 1) as f64) as usize;
    for py in y_lo..=y_hi {
        for px in x_lo..=x_hi {
            let dx = px as f64 - cx;
            let dy = py as f64 - cy;
            let d = libm::sqrt(dx * dx + dy * dy);
            let cover = (radius + 0.5 - d).clamp(0.0, 1.0);
            if cover > 0.0 {
                let val = v * cover;
                let cell = &mut img[py * w + px];
                if val > *cell {
                    *cell = val;
                }
            }
        }
    }
}

// ── A-line volumes ──────────────────────────────────────────────────

/// M x N stack of axial signals, one A-line per lateral pixel, stored
/// A-line-contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct AlineVolume {
    rows: usize,
    cols: usize,
    depth: usize,
    data: Vec<f64>,
}

impl AlineVolume {
    pub fn zeros(rows: usize, cols: usize, depth: usize) -> Result<AlineVolume> {
        if depth < 4 {
            return Err(Error::Config(format!("A-line depth {depth} below minimum 4")));
        }
        Ok(AlineVolume { rows, cols, depth, data: vec![0.0; rows * cols * depth] })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn aline(&self, i: usize, j: usize) -> &[f64] {
        &self.data[(i * self.cols + j) * self.depth..][..self.depth]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Rank-3 tensor view (rows, cols, depth) for the .tns container.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.rows, self.cols, self.depth], self.data.clone()).unwrap()
    }

    pub fn from_tensor(t: &Tensor) -> Result<AlineVolume> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::Dim(format!("A-line volume wants rank 3, got {s:?}")));
        }
        if s[2] < 4 {
            return Err(Error::Config(format!("A-line depth {} below minimum 4", s[2])));
        }
        Ok(AlineVolume { rows: s[0], cols: s[1], depth: s[2], data: t.data().to_vec() })
    }
}

/// Lift a clean 2D image into an A-line volume: every bright pixel
/// becomes a Gaussian axial pulse peaking exactly at its (integer) depth,
/// so the projection below reproduces the image exactly. The depth map
/// is a smooth random field, locally coherent across neighbors.
pub fn lift_to_volume(img: &Tensor, depth: usize, pulse_sigma: f64, seed: u64) -> Result<AlineVolume> {
    let (h, w) = img.dims2()?;
    if depth < 4 {
        return Err(Error::Config(format!("A-line depth {depth} below minimum 4")));
    }
    if pulse_sigma <= 0.0 {
        return Err(Error::Config("pulse sigma must be positive".into()));
    }
    let margin = libm::ceil(3.0 * pulse_sigma) as usize;
    if 2 * margin + 1 > depth {
        return Err(Error::Config(format!(
            "pulse support {} samples exceeds the {depth}-sample depth window",
            2 * margin + 1
        )));
    }

    // coarse random surface, bilinearly interpolated, then snapped to
    // integer depths inside the margins
    let cell = 16usize;
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let mut rng = Rng::substream(seed, 0x4c494654); // lift stream
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.range(-1.0, 1.0)).collect();
    let center = (depth - 1) as f64 / 2.0;
    let amp = center - margin as f64;

    let mut vol = AlineVolume::zeros(h, w, depth)?;
    let inv_two_sigma_sq = 1.0 / (2.0 * pulse_sigma * pulse_sigma);
    for i in 0..h {
        for j in 0..w {
            let v = img.data()[i * w + j];
            if v <= 0.0 {
                continue;
            }
            let gy = i as f64 / cell as f64;
            let gx = j as f64 / cell as f64;
            let (y0, x0) = (gy as usize, gx as usize);
            let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let field = g(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + g(y0, x0 + 1) * (1.0 - fy) * fx
                + g(y0 + 1, x0) * fy * (1.0 - fx)
                + g(y0 + 1, x0 + 1) * fy * fx;
            let d = libm::round(center + amp * field)
                .clamp(margin as f64, (depth - 1 - margin) as f64);
            let line = &mut vol.data[(i * w + j) * depth..][..depth];
            for (z, out) in line.iter_mut().enumerate() {
                let dz = z as f64 - d;
                *out = v * libm::exp(-dz * dz * inv_two_sigma_sq);
            }
        }
    }
    Ok(vol)
}

/// Inject the three-component noise model, sample by sample in storage
/// order: the non-negative part of the signal is replaced by a scaled
/// Poisson draw (negative residue preserved), then Gaussian and Rayleigh
/// terms are added. Components with zero parameters draw nothing, so the
/// all-zero spec is the exact identity.
pub fn add_noise(vol: &AlineVolume, spec: &NoiseSpec, seed: u64) -> Result<AlineVolume> {
    spec.validate()?;
    let mut out = vol.clone();
    let mut rng = Rng::substream(seed, 0x4e4f4953); // noise stream
    let s = spec.poisson_scale;
    let sg = spec.gaussian_sigma;
    let sr = spec.rayleigh_sigma;
    for x in out.data.iter_mut() {
        if s > 0.0 {
            let pos = x.max(0.0);
            *x = rng.poisson(pos * s) as f64 / s + (*x - pos);
        }
        if sg > 0.0 {
            *x += sg * rng.normal();
        }
        if sr > 0.0 {
            *x += rng.rayleigh(sr);
        }
    }
    Ok(out)
}

/// Maximum amplitude projection along the axial direction:
/// out(i, j) = max_z |vol(i, j, z)|.
pub fn map_project(vol: &AlineVolume) -> Tensor {
    let mut img = vec![0.0f64; vol.rows * vol.cols];
    for (px, line) in img.iter_mut().zip(vol.data.chunks_exact(vol.depth)) {
        *px = line.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    }
    Tensor::from_vec(&[vol.rows, vol.cols], img).unwrap()
}

/// 99.9th-percentile (nearest-rank) of the values.
pub fn percentile_999(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let rank = libm::ceil(0.999 * sorted.len() as f64) as usize;
    sorted[rank.saturating_sub(1).min(sorted.len() - 1)]
}

/// Synthesize one training pair with the default lift geometry.
pub fn make_pair(clean: &Tensor, spec: &NoiseSpec, seed: u64) -> Result<(Tensor, Tensor)> {
    let (noisy, clean, _) = make_pair_with(clean, spec, seed, DEFAULT_DEPTH, DEFAULT_PULSE_SIGMA)?;
    Ok((noisy, clean))
}

/// Full pipeline: lift -> noise -> MAP -> normalize. The noisy projection
/// is rescaled by its own 99.9th percentile only when noise pushed it
/// above 1, then clipped to [0, 1]; a zero spec therefore round-trips the
/// clean image untouched. Returns (noisy, clean, normalization scale).
pub fn make_pair_with(
    clean: &Tensor,
    spec: &NoiseSpec,
    seed: u64,
    depth: usize,
    pulse_sigma: f64,
) -> Result<(Tensor, Tensor, f64)> {
    let vol = lift_to_volume(clean, depth, pulse_sigma, derive_seed(seed, 1))?;
    let noisy_vol = add_noise(&vol, spec, derive_seed(seed, 2))?;
    let raw = map_project(&noisy_vol);
    let scale = percentile_999(raw.data()).max(1.0);
    let noisy = Tensor::from_vec(
        raw.shape(),
        raw.data().iter().map(|&v| (v / scale).clamp(0.0, 1.0)).collect(),
    )?;
    Ok((noisy, clean.clone(), scale))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_phantom(seed: u64) -> Tensor {
        gen_phantom(&PhantomSpec::veins(64, 64, seed)).unwrap()
    }

    #[test]
    fn phantom_is_deterministic_and_bounded() {
        let a = gen_phantom(&PhantomSpec::veins(64, 64, 5)).unwrap();
        let b = gen_phantom(&PhantomSpec::veins(64, 64, 5)).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn phantom_with_no_branches_is_rejected() {
        let mut spec = PhantomSpec::veins(64, 64, 1);
        spec.branch_count = 0;
        assert!(matches!(gen_phantom(&spec), Err(Error::Config(_))));
        let small = PhantomSpec::veins(20, 20, 1);
        assert!(matches!(gen_phantom(&small), Err(Error::Config(_))));
    }

    #[test]
    fn phantom_foreground_fraction_within_band() {
        // measured over 100 seeds before freezing the default recipes
        for kind in [PhantomKind::Veins, PhantomKind::Vessels] {
            for seed in 0..100u64 {
                let spec = match kind {
                    PhantomKind::Veins => PhantomSpec::veins(64, 64, seed),
                    PhantomKind::Vessels => PhantomSpec::vessels(64, 64, seed),
                };
                let img = gen_phantom(&spec).unwrap();
                let fg = img.data().iter().filter(|&&v| v > 0.1).count() as f64
                    / img.numel() as f64;
                assert!(
                    (0.01..=0.40).contains(&fg),
                    "{:?} seed {seed}: foreground {fg}",
                    kind
                );
            }
        }
        // spot check at full resolution
        for seed in 0..10u64 {
            let img = gen_phantom(&PhantomSpec::veins(256, 256, seed)).unwrap();
            let fg = img.data().iter().filter(|&&v| v > 0.1).count() as f64 / img.numel() as f64;
            assert!((0.01..=0.40).contains(&fg), "256px seed {seed}: foreground {fg}");
        }
    }

    #[test]
    fn lift_then_map_is_exact_round_trip() {
        let img = test_phantom(11);
        let vol = lift_to_volume(&img, 32, 2.0, 7).unwrap();
        let back = map_project(&vol);
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn lift_zero_image_gives_zero_volume() {
        let img = Tensor::zeros(&[32, 32]);
        let vol = lift_to_volume(&img, 16, 1.5, 3).unwrap();
        assert!(vol.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lift_pulse_matches_closed_form() {
        let mut img = Tensor::zeros(&[32, 32]);
        img.data_mut()[5 * 32 + 9] = 0.8;
        let sigma = 2.0;
        let vol = lift_to_volume(&img, 32, sigma, 21).unwrap();
        let line = vol.aline(5, 9);
        let peak_z = line
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!((line[peak_z] - 0.8).abs() < 1e-12);
        for (z, &v) in line.iter().enumerate() {
            let dz = z as f64 - peak_z as f64;
            let expect = 0.8 * libm::exp(-dz * dz / (2.0 * sigma * sigma));
            assert!((v - expect).abs() < 1e-12, "z={z}: {v} vs {expect}");
        }
    }

    #[test]
    fn lift_rejects_pulse_wider_than_window() {
        let img = test_phantom(1);
        assert!(matches!(lift_to_volume(&img, 8, 2.0, 1), Err(Error::Config(_))));
        assert!(matches!(lift_to_volume(&img, 3, 0.2, 1), Err(Error::Config(_))));
    }

    #[test]
    fn zero_spec_is_exact_identity() {
        let img = test_phantom(2);
        let vol = lift_to_volume(&img, 32, 2.0, 2).unwrap();
        let out = add_noise(&vol, &NoiseSpec::zero(), 99).unwrap();
        assert_eq!(out.data(), vol.data());
    }

    #[test]
    fn gaussian_component_moment() {
        let vol = AlineVolume::zeros(100, 100, 100).unwrap();
        let spec = NoiseSpec { gaussian_sigma: 0.1, ..NoiseSpec::zero() };
        let out = add_noise(&vol, &spec, 5).unwrap();
        let n = out.data().len() as f64;
        let mean: f64 = out.data().iter().sum::<f64>() / n;
        let var: f64 = out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = libm::sqrt(var);
        assert!((std / 0.1 - 1.0).abs() < 0.01, "std {std}");
    }

    #[test]
    fn rayleigh_component_moments() {
        let vol = AlineVolume::zeros(100, 100, 100).unwrap();
        let sr = 0.05;
        let spec = NoiseSpec { rayleigh_sigma: sr, ..NoiseSpec::zero() };
        let out = add_noise(&vol, &spec, 6).unwrap();
        let n = out.data().len() as f64;
        let mean: f64 = out.data().iter().sum::<f64>() / n;
        let var: f64 = out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let pi = core::f64::consts::PI;
        assert!((mean / (sr * libm::sqrt(pi / 2.0)) - 1.0).abs() < 0.01, "mean {mean}");
        assert!((var / ((2.0 - pi / 2.0) * sr * sr) - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn poisson_component_variance_is_mean_over_scale() {
        let amplitude = 0.5;
        let s = 500.0;
        let mut vol = AlineVolume::zeros(100, 100, 100).unwrap();
        vol.data.iter_mut().for_each(|v| *v = amplitude);
        let spec = NoiseSpec { poisson_scale: s, ..NoiseSpec::zero() };
        let out = add_noise(&vol, &spec, 7).unwrap();
        let n = out.data().len() as f64;
        let mean: f64 = out.data().iter().sum::<f64>() / n;
        let var: f64 = out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!((mean / amplitude - 1.0).abs() < 0.01, "mean {mean}");
        assert!((var / (amplitude / s) - 1.0).abs() < 0.01, "var {var} vs {}", amplitude / s);
    }

    #[test]
    fn noise_is_independent_across_alines() {
        let vol = AlineVolume::zeros(2, 1, 100_000).unwrap();
        let spec = NoiseSpec { gaussian_sigma: 0.1, ..NoiseSpec::zero() };
        let out = add_noise(&vol, &spec, 8).unwrap();
        let a = out.aline(0, 0);
        let b = out.aline(1, 0);
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (x, y) in a.iter().zip(b) {
            cov += (x - ma) * (y - mb);
            va += (x - ma) * (x - ma);
            vb += (y - mb) * (y - mb);
        }
        let corr = cov / libm::sqrt(va * vb);
        assert!(corr.abs() < 0.01, "correlation {corr}");
    }

    #[test]
    fn map_project_hand_values() {
        let mut vol = AlineVolume::zeros(1, 1, 4).unwrap();
        vol.data[..4].copy_from_slice(&[0.1, -0.9, 0.3, 0.0]);
        let img = map_project(&vol);
        assert_eq!(img.data(), &[0.9]);

        let zeros = AlineVolume::zeros(3, 3, 8).unwrap();
        assert!(map_project(&zeros).data().iter().all(|&v| v == 0.0));

        // raising one |sample| never lowers its pixel
        let before = map_project(&vol).data()[0];
        vol.data[2] = -2.5;
        assert!(map_project(&vol).data()[0] >= before);
    }

    #[test]
    fn make_pair_zero_noise_round_trips() {
        let img = test_phantom(3);
        let (noisy, clean) = make_pair(&img, &NoiseSpec::zero(), 55).unwrap();
        assert_eq!(clean.data(), img.data());
        for (a, b) in noisy.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn make_pair_is_deterministic() {
        let img = test_phantom(4);
        let spec = sample_noise_spec(NoiseLevel::Mid, 40);
        let (a, _) = make_pair(&img, &spec, 77).unwrap();
        let (b, _) = make_pair(&img, &spec, 77).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let (c, _) = make_pair(&img, &spec, 78).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn noise_levels_order_image_quality() {
        // mean PSNR over 20 seeds must fall strictly low -> mid -> high
        let img = test_phantom(9);
        let psnr = |noisy: &Tensor| {
            let mse: f64 = noisy
                .data()
                .iter()
                .zip(img.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / noisy.numel() as f64;
            10.0 * libm::log10(1.0 / mse)
        };
        let mut means = [0.0f64; 3];
        for (li, level) in NoiseLevel::ALL.iter().enumerate() {
            for seed in 0..20u64 {
                let spec = sample_noise_spec(*level, 1000 + seed);
                let (noisy, _) = make_pair(&img, &spec, 2000 + seed).unwrap();
                means[li] += psnr(&noisy) / 20.0;
            }
        }
        assert!(means[0] > means[1] && means[1] > means[2], "psnr means {means:?}");
    }

    #[test]
    fn sampled_specs_stay_in_their_bands() {
        for seed in 0..50u64 {
            let spec = sample_noise_spec(NoiseLevel::Low, seed);
            assert_eq!(spec.level, NoiseLevel::Low);
            assert!((0.02..0.06).contains(&spec.gaussian_sigma), "{spec:?}");
            assert!((0.005..0.015).contains(&spec.rayleigh_sigma), "{spec:?}");
            assert!((200.0..2000.0).contains(&spec.poisson_scale), "{spec:?}");
        }
        let a = sample_noise_spec(NoiseLevel::High, 3);
        let b = sample_noise_spec(NoiseLevel::High, 3);
        assert_eq!(a, b);
    }
}
