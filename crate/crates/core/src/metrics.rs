//! Image quality metrics: full-reference PSNR and SSIM for synthetic
//! pairs with ground truth, no-reference SNR and CNR over signal and
//! background regions of interest for real acquisitions.
//!
//! Zero-error and zero-background-variance cases return infinity
//! sentinels; aggregation excludes non-finite rows and reports how many
//! were dropped.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Peak value of normalized images.
pub const PEAK: f64 = 1.0;
/// Signal ROIs used in the evaluation protocol.
pub const SIGNAL_ROI_COUNT: usize = 4;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

// ── Regions of interest ─────────────────────────────────────────────

/// Axis-aligned box; x is the column of the left edge, y the row of the
/// top edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl RoiBox {
    fn intersects(&self, other: &RoiBox) -> bool {
        self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }
}

/// The signal boxes plus one background box of the SNR/CNR protocol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiSet {
    pub signal: Vec<RoiBox>,
    pub background: RoiBox,
}

impl RoiSet {
    pub fn validate(&self, img_h: usize, img_w: usize) -> Result<()> {
        if self.signal.is_empty() {
            return Err(Error::Usage("RoiSet needs at least one signal box".into()));
        }
        for (i, b) in self.signal.iter().chain(core::iter::once(&self.background)).enumerate() {
            if b.w < 2 || b.h < 2 {
                return Err(Error::Config(format!("ROI {i} is degenerate: {b:?}")));
            }
            if b.x + b.w > img_w || b.y + b.h > img_h {
                return Err(Error::Config(format!(
                    "ROI {i} {b:?} leaves the {img_h}x{img_w} image"
                )));
            }
        }
        for (i, b) in self.signal.iter().enumerate() {
            if b.intersects(&self.background) {
                return Err(Error::Config(format!(
                    "signal ROI {i} {b:?} overlaps the background box {:?}",
                    self.background
                )));
            }
        }
        Ok(())
    }
}

/// Mean and sample standard deviation of the pixels under a box. A box
/// of identical values reports exactly that value with zero deviation,
/// so the degenerate-ROI sentinels do not depend on summation rounding.
fn box_stats(img: &Tensor, b: &RoiBox) -> (f64, f64) {
    let (_, w) = img.dims2().expect("validated rank-2 image");
    let first = img.data()[b.y * w + b.x];
    let constant = (b.y..b.y + b.h)
        .all(|row| img.data()[row * w + b.x..][..b.w].iter().all(|&v| v == first));
    if constant {
        return (first, 0.0);
    }
    let n = (b.w * b.h) as f64;
    let mut sum = 0.0;
    for row in b.y..b.y + b.h {
        sum += kernels::sum(&img.data()[row * w + b.x..][..b.w]);
    }
    let mean = sum / n;
    let mut ss = 0.0;
    for row in b.y..b.y + b.h {
        ss += kernels::sum_sq_dev(&img.data()[row * w + b.x..][..b.w], mean);
    }
    (mean, libm::sqrt(ss / (n - 1.0)))
}

// ── Full-reference metrics ──────────────────────────────────────────

/// Peak signal-to-noise ratio in dB; identical images return +inf.
pub fn psnr(x: &Tensor, reference: &Tensor, peak: f64) -> Result<f64> {
    if x.shape() != reference.shape() {
        return Err(Error::Dim(format!(
            "psnr shapes disagree: {:?} vs {:?}",
            x.shape(),
            reference.shape()
        )));
    }
    if peak <= 0.0 {
        return Err(Error::Range(format!("psnr peak {peak} must be positive")));
    }
    let mut se = 0.0;
    for (a, b) in x.data().iter().zip(reference.data()) {
        let d = a - b;
        se += d * d;
    }
    let mse = se / x.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * libm::log10(peak * peak / mse))
}

/// Mean structural similarity with the canonical 11x11 Gaussian window
/// (sigma 1.5) over valid positions; constants use peak 1.
pub fn ssim(x: &Tensor, reference: &Tensor) -> Result<f64> {
    if x.shape() != reference.shape() {
        return Err(Error::Dim(format!(
            "ssim shapes disagree: {:?} vs {:?}",
            x.shape(),
            reference.shape()
        )));
    }
    let (h, w) = x.dims2()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dim(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let c1 = (0.01 * PEAK) * (0.01 * PEAK);
    let c2 = (0.03 * PEAK) * (0.03 * PEAK);
    let kernel = gaussian_kernel();

    let xd = x.data();
    let yd = reference.data();
    let xx: Vec<f64> = xd.iter().map(|a| a * a).collect();
    let yy: Vec<f64> = yd.iter().map(|a| a * a).collect();
    let xy: Vec<f64> = xd.iter().zip(yd).map(|(a, b)| a * b).collect();

    let mu_x = blur_valid(xd, h, w, &kernel);
    let mu_y = blur_valid(yd, h, w, &kernel);
    let m_xx = blur_valid(&xx, h, w, &kernel);
    let m_yy = blur_valid(&yy, h, w, &kernel);
    let m_xy = blur_valid(&xy, h, w, &kernel);

    let mut acc = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = m_xx[i] - mx * mx;
        let vy = m_yy[i] - my * my;
        let cxy = m_xy[i] - mx * my;
        acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
            / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(acc / mu_x.len() as f64)
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut total = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = libm::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
        total += *v;
    }
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable valid-region Gaussian filter: horizontal pass then vertical.
fn blur_valid(img: &[f64], h: usize, w: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; h * ow];
    for row in 0..h {
        for col in 0..ow {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * img[row * w + col + k];
            }
            horiz[row * ow + col] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for row in 0..oh {
        for col in 0..ow {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * horiz[(row + k) * ow + col];
            }
            out[row * ow + col] = acc;
        }
    }
    out
}

// ── No-reference metrics ────────────────────────────────────────────

/// SNR in dB: 20 log10(mean of signal-ROI means / background std).
/// Zero background deviation returns +inf; a negative mean of means is
/// an ROI placement error.
pub fn snr(img: &Tensor, rois: &RoiSet) -> Result<f64> {
    let (h, w) = img.dims2()?;
    rois.validate(h, w)?;
    let mut mean_sum = 0.0;
    for b in &rois.signal {
        mean_sum += box_stats(img, b).0;
    }
    let num = mean_sum / rois.signal.len() as f64;
    if num < 0.0 {
        return Err(Error::Usage(format!(
            "mean of signal ROI means is negative ({num}); ROI placement is invalid"
        )));
    }
    let (_, sigma_b) = box_stats(img, &rois.background);
    if sigma_b == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * libm::log10(num / sigma_b))
}

/// CNR in dB: 20 log10 of the mean over ROIs of |mu_i - mu_b| /
/// sqrt(sigma_i^2 + sigma_b^2). Indistinguishable ROIs give -inf.
pub fn cnr(img: &Tensor, rois: &RoiSet) -> Result<f64> {
    let (h, w) = img.dims2()?;
    rois.validate(h, w)?;
    let (mu_b, sigma_b) = box_stats(img, &rois.background);
    let mut ratio_sum = 0.0;
    let mut usable = 0;
    for b in &rois.signal {
        let (mu_i, sigma_i) = box_stats(img, b);
        let den = libm::sqrt(sigma_i * sigma_i + sigma_b * sigma_b);
        let num = (mu_i - mu_b).abs();
        if den == 0.0 {
            if num == 0.0 {
                ratio_sum += 0.0;
            } else {
                return Ok(f64::INFINITY);
            }
        } else {
            usable += 1;
            ratio_sum += num / den;
        }
    }
    if usable == 0 {
        return Err(Error::Usage(
            "every ROI pair has zero variance; CNR is undefined".into(),
        ));
    }
    Ok(20.0 * libm::log10(ratio_sum / rois.signal.len() as f64))
}

// ── Automatic ROI placement ─────────────────────────────────────────

/// Place the four signal boxes on the brightest well-separated blobs of
/// a clean image and the background box on the emptiest region. Intended
/// for phantom evaluation where hand-drawn boxes are impractical.
pub fn auto_rois(clean: &Tensor, box_size: usize) -> Result<RoiSet> {
    let (h, w) = clean.dims2()?;
    let bs = box_size.max(2);
    if bs * 3 > h.min(w) {
        return Err(Error::Config(format!(
            "ROI box {bs} is too large for a {h}x{w} image"
        )));
    }
    let smooth = box_blur3(clean.data(), h, w);

    let mut order: Vec<usize> = (0..h * w).collect();
    order.sort_by(|&a, &b| smooth[b].total_cmp(&smooth[a]).then(a.cmp(&b)));

    let mut centers: Vec<(usize, usize)> = Vec::new();
    let mut separation = bs * 2;
    while centers.len() < SIGNAL_ROI_COUNT && separation >= bs {
        centers.clear();
        for &idx in &order {
            let (cy, cx) = (idx / w, idx % w);
            if smooth[idx] <= 0.1 {
                break;
            }
            if cy < bs / 2 + 1 || cx < bs / 2 + 1 || cy + bs / 2 + 1 > h || cx + bs / 2 + 1 > w {
                continue;
            }
            if centers
                .iter()
                .all(|&(py, px)| py.abs_diff(cy).max(px.abs_diff(cx)) >= separation)
            {
                centers.push((cy, cx));
                if centers.len() == SIGNAL_ROI_COUNT {
                    break;
                }
            }
        }
        if centers.len() < SIGNAL_ROI_COUNT {
            separation /= 2;
        }
    }
    if centers.len() < SIGNAL_ROI_COUNT {
        return Err(Error::Usage(format!(
            "found only {} separable foreground blobs for {SIGNAL_ROI_COUNT} signal ROIs",
            centers.len()
        )));
    }
    let signal: Vec<RoiBox> = centers
        .iter()
        .map(|&(cy, cx)| RoiBox { x: cx - bs / 2, y: cy - bs / 2, w: bs, h: bs })
        .collect();

    // emptiest candidate box on a half-box grid, skipping signal overlap
    let stride = (bs / 2).max(1);
    let mut best: Option<(f64, RoiBox)> = None;
    let mut y = 0;
    while y + bs <= h {
        let mut x = 0;
        while x + bs <= w {
            let cand = RoiBox { x, y, w: bs, h: bs };
            if signal.iter().all(|s| !s.intersects(&cand)) {
                let mut mass = 0.0;
                for row in y..y + bs {
                    mass += kernels::sum(&clean.data()[row * w + x..][..bs]);
                }
                if best.as_ref().map_or(true, |(m, _)| mass < *m) {
                    best = Some((mass, cand));
                }
            }
            x += stride;
        }
        y += stride;
    }
    let background = best
        .map(|(_, b)| b)
        .ok_or_else(|| Error::Usage("no background box position avoids the signal ROIs".into()))?;

    let set = RoiSet { signal, background };
    set.validate(h, w)?;
    Ok(set)
}

fn box_blur3(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut n = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        acc += img[yy as usize * w + xx as usize];
                        n += 1.0;
                    }
                }
            }
            out[y * w + x] = acc / n;
        }
    }
    out
}

// ── Aggregation ─────────────────────────────────────────────────────

/// Mean and sample standard deviation over the finite entries; infinite
/// sentinels are counted and excluded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    pub excluded: usize,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let excluded = values.len() - finite.len();
    if finite.is_empty() {
        return Aggregate { mean: f64::NAN, std: f64::NAN, count: 0, excluded };
    }
    let n = finite.len() as f64;
    let mean = kernels::sum(&finite) / n;
    let std = if finite.len() < 2 {
        0.0
    } else {
        libm::sqrt(kernels::sum_sq_dev(&finite, mean) / (n - 1.0))
    };
    Aggregate { mean, std, count: finite.len(), excluded }
}
