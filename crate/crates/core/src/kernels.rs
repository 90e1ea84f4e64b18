//! Raw convolution and pooling kernels over flat row-major buffers.
//!
//! The hot loops are written so the innermost dimension walks contiguous
//! memory wherever the stride allows, which is what the optimizer needs
//! to vectorize them. The tape wraps these with shape checking and
//! gradient bookkeeping.

use alloc::vec;
use alloc::vec::Vec;

/// Dot product with four fixed accumulator lanes. The lane split breaks
/// the sequential dependency chain so the loop can keep the FMA units
/// busy; the summation order is fixed, so results stay reproducible.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let j = 4 * i;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..n {
        tail += a[j] * b[j];
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// Sum with the same fixed four-lane split as [`dot`].
#[inline]
pub fn sum(a: &[f64]) -> f64 {
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let j = 4 * i;
        s0 += a[j];
        s1 += a[j + 1];
        s2 += a[j + 2];
        s3 += a[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..n {
        tail += a[j];
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// Sum of squared deviations from `m`, same lane structure as [`sum`].
#[inline]
pub fn sum_sq_dev(a: &[f64], m: f64) -> f64 {
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let j = 4 * i;
        let (d0, d1, d2, d3) = (a[j] - m, a[j + 1] - m, a[j + 2] - m, a[j + 3] - m);
        s0 += d0 * d0;
        s1 += d1 * d1;
        s2 += d2 * d2;
        s3 += d3 * d3;
    }
    let mut tail = 0.0;
    for j in 4 * chunks..n {
        let d = a[j] - m;
        tail += d * d;
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// Geometry of one cross-correlation, resolved at op-record time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Output index range [lo, hi) for which `o*stride + k - pad` lands
/// inside [0, in_size).
#[inline]
fn valid_range(k: usize, pad: usize, in_size: usize, out_size: usize, stride: usize) -> (usize, usize) {
    let shift = k as isize - pad as isize;
    let lo = if shift >= 0 {
        0
    } else {
        (((-shift) as usize) + stride - 1) / stride
    };
    let last = in_size as isize - 1 - shift;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last as usize / stride + 1).min(out_size);
    (lo, hi.max(lo))
}

/// Entry point; picks a fused kernel for the two layer geometries the
/// models actually use and falls back to the generic triple loop.
pub fn conv2d_fwd(x: &[f64], w: &[f64], b: &[f64], d: &ConvDims, y: &mut [f64]) {
    if is_k3s1_same(d) {
        conv2d_fwd_k3s1(x, w, b, d, y)
    } else if is_k3s2_tf(d) {
        conv2d_fwd_k3s2(x, w, b, d, y)
    } else {
        conv2d_fwd_generic(x, w, b, d, y)
    }
}

pub fn conv2d_bwd_input(dy: &[f64], w: &[f64], d: &ConvDims, dx: &mut [f64]) {
    if is_k3s1_same(d) {
        conv2d_bwd_input_k3s1(dy, w, d, dx)
    } else if is_k3s2_tf(d) {
        conv2d_bwd_input_k3s2(dy, w, d, dx)
    } else {
        conv2d_bwd_input_generic(dy, w, d, dx)
    }
}

pub fn conv2d_bwd_weight(dy: &[f64], x: &[f64], d: &ConvDims, dw: &mut [f64]) {
    if is_k3s1_same(d) {
        conv2d_bwd_weight_k3s1(dy, x, d, dw)
    } else if is_k3s2_tf(d) {
        conv2d_bwd_weight_k3s2(dy, x, d, dw)
    } else {
        conv2d_bwd_weight_generic(dy, x, d, dw)
    }
}

/// 3x3, stride 1, symmetric pad 1 (shape preserving).
#[inline]
fn is_k3s1_same(d: &ConvDims) -> bool {
    d.kh == 3 && d.kw == 3 && d.stride == 1 && d.pad_top == 1 && d.pad_left == 1
        && d.oh == d.h && d.ow == d.w && d.w >= 2 && d.h >= 2
}

/// 3x3, stride 2, pad (0 before, 1 after) on both axes (exact halving).
#[inline]
fn is_k3s2_tf(d: &ConvDims) -> bool {
    d.kh == 3 && d.kw == 3 && d.stride == 2 && d.pad_top == 0 && d.pad_left == 0
        && 2 * d.oh == d.h && 2 * d.ow == d.w && d.w >= 4 && d.h >= 4
}

fn conv2d_fwd_k3s1(x: &[f64], w: &[f64], b: &[f64], d: &ConvDims, y: &mut [f64]) {
    let wid = d.w;
    for n in 0..d.n {
        for co in 0..d.co {
            let y_plane = &mut y[((n * d.co + co) * d.oh) * d.ow..][..d.oh * d.ow];
            y_plane.iter_mut().for_each(|v| *v = b[co]);
            for ci in 0..d.ci {
                let x_plane = &x[((n * d.ci + ci) * d.h) * d.w..][..d.h * d.w];
                for kh in 0..3usize {
                    let (oh_lo, oh_hi) = valid_range(kh, 1, d.h, d.oh, 1);
                    let wr = &w[((co * d.ci + ci) * 3 + kh) * 3..][..3];
                    let (w0, w1, w2) = (wr[0], wr[1], wr[2]);
                    for oh in oh_lo..oh_hi {
                        let ih = oh + kh - 1;
                        let xr = &x_plane[ih * wid..][..wid];
                        let yr = &mut y_plane[oh * wid..][..wid];
                        yr[0] += w1 * xr[0] + w2 * xr[1];
                        yr[wid - 1] += w0 * xr[wid - 2] + w1 * xr[wid - 1];
                        for i in 1..wid - 1 {
                            yr[i] += w0 * xr[i - 1] + w1 * xr[i] + w2 * xr[i + 1];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_bwd_input_k3s1(dy: &[f64], w: &[f64], d: &ConvDims, dx: &mut [f64]) {
    let wid = d.w;
    for n in 0..d.n {
        for co in 0..d.co {
            let dy_plane = &dy[((n * d.co + co) * d.oh) * d.ow..][..d.oh * d.ow];
            for ci in 0..d.ci {
                let dx_plane = &mut dx[((n * d.ci + ci) * d.h) * d.w..][..d.h * d.w];
                for kh in 0..3usize {
                    let (oh_lo, oh_hi) = valid_range(kh, 1, d.h, d.oh, 1);
                    let wr = &w[((co * d.ci + ci) * 3 + kh) * 3..][..3];
                    let (w0, w1, w2) = (wr[0], wr[1], wr[2]);
                    for oh in oh_lo..oh_hi {
                        let ih = oh + kh - 1;
                        let gr = &dy_plane[oh * wid..][..wid];
                        let dr = &mut dx_plane[ih * wid..][..wid];
                        dr[0] += w0 * gr[1] + w1 * gr[0];
                        dr[wid - 1] += w1 * gr[wid - 1] + w2 * gr[wid - 2];
                        for i in 1..wid - 1 {
                            dr[i] += w0 * gr[i + 1] + w1 * gr[i] + w2 * gr[i - 1];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_bwd_weight_k3s1(dy: &[f64], x: &[f64], d: &ConvDims, dw: &mut [f64]) {
    let wid = d.w;
    for co in 0..d.co {
        for ci in 0..d.ci {
            for kh in 0..3usize {
                let (oh_lo, oh_hi) = valid_range(kh, 1, d.h, d.oh, 1);
                let (mut a0, mut a1, mut a2) = (0.0, 0.0, 0.0);
                for n in 0..d.n {
                    let dy_plane = &dy[((n * d.co + co) * d.oh) * d.ow..][..d.oh * d.ow];
                    let x_plane = &x[((n * d.ci + ci) * d.h) * d.w..][..d.h * d.w];
                    for oh in oh_lo..oh_hi {
                        let ih = oh + kh - 1;
                        let gr = &dy_plane[oh * wid..][..wid];
                        let xr = &x_plane[ih * wid..][..wid];
                        a0 += dot(&gr[1..], &xr[..wid - 1]);
                        a1 += dot(gr, xr);
                        a2 += dot(&gr[..wid - 1], &xr[1..]);
                    }
                }
                let base = ((co * d.ci + ci) * 3 + kh) * 3;
                dw[base] += a0;
                dw[base + 1] += a1;
                dw[base + 2] += a2;
            }
        }
    }
}

fn conv2d_fwd_k3s2(x: &[f64], w: &[f64], b: &[f64], d: &ConvDims, y: &mut [f64]) {
    let (wid, oww) = (d.w, d.ow);
    for n in 0..d.n {
        for co in 0..d.co {
            let y_plane = &mut y[((n * d.co + co) * d.oh) * d.ow..][..d.oh * d.ow];
            y_plane.iter_mut().for_each(|v| *v = b[co]);
            for ci in 0..d.ci {
                let x_plane = &x[((n * d.ci + ci) * d.h) * d.w..][..d.h * d.w];
                for kh in 0..3usize {
                    let (oh_lo, oh_hi) = valid_range(kh, 0, d.h, d.oh, 2);
                    let wr = &w[((co * d.ci + ci) * 3 + kh) * 3..][..3];
                    let (w0, w1, w2) = (wr[0], wr[1], wr[2]);
                    for oh in oh_lo..oh_hi {
                        let ih = 2 * oh + kh;
                        let xr = &x_plane[ih * wid..][..wid];
                        let yr = &mut y_plane[oh * oww..][..oww];
                        for i in 0..oww - 1 {
                            let j = 2 * i;
                            yr[i] += w0 * xr[j] + w1 * xr[j + 1] + w2 * xr[j + 2];
                        }
                        yr[oww - 1] += w0 * xr[wid - 2] + w1 * xr[wid - 1];
                    }
                }
            }
        }
    }
}

fn conv2d_bwd_input_k3s2(dy: &[f64], w: &[f64], d: &ConvDims, dx: &mut [f64]) {
    let (wid, oww) = (d.w, d.ow);
    for n in 0..d.n {
        for co in 0..d.co {
            let dy_plane = &dy[((n * d.co + co) * d.oh) * d.ow..][..d.oh * d.ow];
            for ci in 0..d.ci {
                let dx_plane = &mut dx[((n * d.ci + ci) * d.h) * d.w..][..d.h * d.w];
                for kh in 0..3usize {
                    let (oh_lo, oh_hi) = valid_range(kh, 0, d.h, d.oh, 2);
                    let wr = &w[((co * d.ci + ci) * 3 + kh) * 3..][..3];
                    let (w0, w1, w2) = (wr[0], wr[1], wr[2]);
                    for oh in oh_lo..oh_hi {
                        let ih = 2 * oh + kh;
                        let gr = &dy_plane[oh * oww..][..oww];
                        let dr = &mut dx_plane[ih * wid..][..wid];
                        for i in 0..oww - 1 {
                            let g = gr[i];
                            let j = 2 * i;
                            dr[j] += w0 * g;
                            dr[j + 1] += w1 * g;
                            dr[j + 2] += w2 * g;
                        }
                        let g = gr[oww - 1];
                        dr[wid - 2] += w0 * g;
                        dr[wid - 1] += w1 * g;
                    }
                }
            }
        }
    }
}

fn conv2d_bwd_weight_k3s2(dy: &[f64], x: &[f64], d: &ConvDims, dw: &mut [f64]) {
    let (wid, oww) = (d.w, d.ow);
    for co in 0..d.co {
        for ci in 0..d.ci {
            for kh in 0..3usize {
                let (oh_lo, oh_hi) = valid_range(kh, 0, d.h, d.oh, 2);
                let (mut a0, mut a1, mut a2) = (0.0, 0.0, 0.0);
                for n in 0..d.n {
                    let dy_plane = &dy[((n * d.co + co) * d.oh) * d.ow..][..d.oh * d.ow];
                    let x_plane = &x[((n * d.ci + ci) * d.h) * d.w..][..d.h * d.w];
                    for oh in oh_lo..oh_hi {
                        let ih = 2 * oh + kh;
                        let gr = &dy_plane[oh * oww..][..oww];
                        let xr = &x_plane[ih * wid..][..wid];
                        for i in 0..oww - 1 {
                            let g = gr[i];
                            let j = 2 * i;
                            a0 += g * xr[j];
                            a1 += g * xr[j + 1];
                            a2 += g * xr[j + 2];
                        }
                        let g = gr[oww - 1];
                        a0 += g * xr[wid - 2];
                        a1 += g * xr[wid - 1];
                    }
                }
                let base = ((co * d.ci + ci) * 3 + kh) * 3;
                dw[base] += a0;
                dw[base + 1] += a1;
                dw[base + 2] += a2;
            }
        }
    }
}

pub fn conv2d_fwd_generic(x: &[f64], w: &[f64], b: &[f64], d: &ConvDims, y: &mut [f64]) {
    let s = d.stride;
    for n in 0..d.n {
        for co in 0..d.co {
            let y_plane = &mut y[((n * d.co + co) * d.oh) * d.ow..][..d.oh * d.ow];
            y_plane.iter_mut().for_each(|v| *v = b[co]);
            for ci in 0..d.ci {
                let x_plane = &x[((n * d.ci + ci) * d.h) * d.w..][..d.h * d.w];
                for kh in 0..d.kh {
                    let (oh_lo, oh_hi) = valid_range(kh, d.pad_top, d.h, d.oh, s);
                    for kw in 0..d.kw {
                        let wv = w[((co * d.ci + ci) * d.kh + kh) * d.kw + kw];
                        let (ow_lo, ow_hi) = valid_range(kw, d.pad_left, d.w, d.ow, s);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + kh - d.pad_top;
                            let y_row = &mut y_plane[oh * d.ow + ow_lo..oh * d.ow + ow_hi];
                            if s == 1 {
                                let iw0 = ow_lo + kw - d.pad_left;
                                let x_row = &x_plane[ih * d.w + iw0..][..ow_hi - ow_lo];
                                for (yv, xv) in y_row.iter_mut().zip(x_row) {
                                    *yv += wv * xv;
                                }
                            } else {
                                for (j, yv) in y_row.iter_mut().enumerate() {
                                    let iw = (ow_lo + j) * s + kw - d.pad_left;
                                    *yv += wv * x_plane[ih * d.w + iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_bwd_input_generic(dy: &[f64], w: &[f64], d: &ConvDims, dx: &mut [f64]) {
    let s = d.stride;
    for n in 0..d.n {
        for co in 0..d.co {
            let dy_plane = &dy[((n * d.co + co) * d.oh) * d.ow..][..d.oh * d.ow];
            for ci in 0..d.ci {
                let dx_plane = &mut dx[((n * d.ci + ci) * d.h) * d.w..][..d.h * d.w];
                for kh in 0..d.kh {
                    let (oh_lo, oh_hi) = valid_range(kh, d.pad_top, d.h, d.oh, s);
                    for kw in 0..d.kw {
                        let wv = w[((co * d.ci + ci) * d.kh + kh) * d.kw + kw];
                        let (ow_lo, ow_hi) = valid_range(kw, d.pad_left, d.w, d.ow, s);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + kh - d.pad_top;
                            let dy_row = &dy_plane[oh * d.ow + ow_lo..oh * d.ow + ow_hi];
                            if s == 1 {
                                let iw0 = ow_lo + kw - d.pad_left;
                                let dx_row = &mut dx_plane[ih * d.w + iw0..][..dy_row.len()];
                                for (dxv, gv) in dx_row.iter_mut().zip(dy_row) {
                                    *dxv += wv * gv;
                                }
                            } else {
                                for (j, gv) in dy_row.iter_enumerate_stride(ow_lo, s, kw, d.pad_left) {
                                    dx_plane[ih * d.w + j] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Iterator shim for the strided scatter in `conv2d_bwd_input`.
trait StrideEnum<'a> {
    fn iter_enumerate_stride(
        &'a self,
        ow_lo: usize,
        stride: usize,
        k: usize,
        pad: usize,
    ) -> StrideIter<'a>;
}

impl<'a> StrideEnum<'a> for [f64] {
    fn iter_enumerate_stride(
        &'a self,
        ow_lo: usize,
        stride: usize,
        k: usize,
        pad: usize,
    ) -> StrideIter<'a> {
        StrideIter { row: self, j: 0, ow_lo, stride, k, pad }
    }
}

struct StrideIter<'a> {
    row: &'a [f64],
    j: usize,
    ow_lo: usize,
    stride: usize,
    k: usize,
    pad: usize,
}

impl<'a> Iterator for StrideIter<'a> {
    type Item = (usize, f64);
    fn next(&mut self) -> Option<(usize, f64)> {
        if self.j >= self.row.len() {
            return None;
        }
        let iw = (self.ow_lo + self.j) * self.stride + self.k - self.pad;
        let v = self.row[self.j];
        self.j += 1;
        Some((iw, v))
    }
}

pub fn conv2d_bwd_weight_generic(dy: &[f64], x: &[f64], d: &ConvDims, dw: &mut [f64]) {
    let s = d.stride;
    for co in 0..d.co {
        for ci in 0..d.ci {
            for kh in 0..d.kh {
                let (oh_lo, oh_hi) = valid_range(kh, d.pad_top, d.h, d.oh, s);
                for kw in 0..d.kw {
                    let (ow_lo, ow_hi) = valid_range(kw, d.pad_left, d.w, d.ow, s);
                    let mut acc = 0.0;
                    for n in 0..d.n {
                        let dy_plane = &dy[((n * d.co + co) * d.oh) * d.ow..][..d.oh * d.ow];
                        let x_plane = &x[((n * d.ci + ci) * d.h) * d.w..][..d.h * d.w];
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + kh - d.pad_top;
                            let dy_row = &dy_plane[oh * d.ow + ow_lo..oh * d.ow + ow_hi];
                            if s == 1 {
                                let iw0 = ow_lo + kw - d.pad_left;
                                let x_row = &x_plane[ih * d.w + iw0..][..dy_row.len()];
                                acc += dot(dy_row, x_row);
                            } else {
                                for (j, gv) in dy_row.iter().enumerate() {
                                    let iw = (ow_lo + j) * s + kw - d.pad_left;
                                    acc += gv * x_plane[ih * d.w + iw];
                                }
                            }
                        }
                    }
                    dw[((co * d.ci + ci) * d.kh + kh) * d.kw + kw] += acc;
                }
            }
        }
    }
}

pub fn conv2d_bwd_bias(dy: &[f64], d: &ConvDims, db: &mut [f64]) {
    for n in 0..d.n {
        for co in 0..d.co {
            let plane = &dy[((n * d.co + co) * d.oh) * d.ow..][..d.oh * d.ow];
            db[co] += sum(plane);
        }
    }
}

// ── Transposed convolution, kernel size == stride ───────────────────

/// Weight layout is (in_c, out_c, k, k); with k == stride every input
/// pixel scatters to a disjoint k x k output patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTDims {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
}

pub fn convt2d_fwd(x: &[f64], w: &[f64], b: &[f64], d: &ConvTDims, y: &mut [f64]) {
    let (oh, ow) = (d.h * d.k, d.w * d.k);
    for n in 0..d.n {
        for co in 0..d.co {
            let y_plane = &mut y[((n * d.co + co) * oh) * ow..][..oh * ow];
            y_plane.iter_mut().for_each(|v| *v = b[co]);
            for ci in 0..d.ci {
                let x_plane = &x[((n * d.ci + ci) * d.h) * d.w..][..d.h * d.w];
                for kh in 0..d.k {
                    for kw in 0..d.k {
                        let wv = w[((ci * d.co + co) * d.k + kh) * d.k + kw];
                        for ih in 0..d.h {
                            let yrow = (ih * d.k + kh) * ow + kw;
                            for iw in 0..d.w {
                                y_plane[yrow + iw * d.k] += wv * x_plane[ih * d.w + iw];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn convt2d_bwd_input(dy: &[f64], w: &[f64], d: &ConvTDims, dx: &mut [f64]) {
    let (oh, ow) = (d.h * d.k, d.w * d.k);
    for n in 0..d.n {
        for ci in 0..d.ci {
            let dx_plane = &mut dx[((n * d.ci + ci) * d.h) * d.w..][..d.h * d.w];
            for co in 0..d.co {
                let dy_plane = &dy[((n * d.co + co) * oh) * ow..][..oh * ow];
                for kh in 0..d.k {
                    for kw in 0..d.k {
                        let wv = w[((ci * d.co + co) * d.k + kh) * d.k + kw];
                        for ih in 0..d.h {
                            let yrow = (ih * d.k + kh) * ow + kw;
                            for iw in 0..d.w {
                                dx_plane[ih * d.w + iw] += wv * dy_plane[yrow + iw * d.k];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn convt2d_bwd_weight(dy: &[f64], x: &[f64], d: &ConvTDims, dw: &mut [f64]) {
    let (oh, ow) = (d.h * d.k, d.w * d.k);
    for ci in 0..d.ci {
        for co in 0..d.co {
            for kh in 0..d.k {
                for kw in 0..d.k {
                    let mut acc = 0.0;
                    for n in 0..d.n {
                        let x_plane = &x[((n * d.ci + ci) * d.h) * d.w..][..d.h * d.w];
                        let dy_plane = &dy[((n * d.co + co) * oh) * ow..][..oh * ow];
                        for ih in 0..d.h {
                            let yrow = (ih * d.k + kh) * ow + kw;
                            for iw in 0..d.w {
                                acc += x_plane[ih * d.w + iw] * dy_plane[yrow + iw * d.k];
                            }
                        }
                    }
                    dw[((ci * d.co + co) * d.k + kh) * d.k + kw] += acc;
                }
            }
        }
    }
}

pub fn convt2d_bwd_bias(dy: &[f64], d: &ConvTDims, db: &mut [f64]) {
    let plane = d.h * d.k * d.w * d.k;
    for n in 0..d.n {
        for co in 0..d.co {
            let p = &dy[(n * d.co + co) * plane..][..plane];
            db[co] += sum(p);
        }
    }
}

// ── 2x2 max pooling ─────────────────────────────────────────────────

/// Returns the pooled buffer plus the flat input index of each winner.
/// Ties pick the first element in row-major window order.
pub fn maxpool2_fwd(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![0.0; n * c * oh * ow];
    let mut arg = vec![0u32; y.len()];
    for nc in 0..n * c {
        let x_plane = &x[nc * h * w..][..h * w];
        let base = nc * h * w;
        for oh_i in 0..oh {
            for ow_i in 0..ow {
                let i0 = (2 * oh_i) * w + 2 * ow_i;
                let cand = [i0, i0 + 1, i0 + w, i0 + w + 1];
                let mut best = cand[0];
                let mut best_v = x_plane[cand[0]];
                for &ci in &cand[1..] {
                    if x_plane[ci] > best_v {
                        best_v = x_plane[ci];
                        best = ci;
                    }
                }
                let o = nc * oh * ow + oh_i * ow + ow_i;
                y[o] = best_v;
                arg[o] = (base + best) as u32;
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_bwd(dy: &[f64], arg: &[u32], dx: &mut [f64]) {
    for (gv, &ai) in dy.iter().zip(arg) {
        dx[ai as usize] += gv;
    }
}
