//! Dense numeric kernels shared by the tape ops and the pure loss functions.
//!
//! Kernels are single-threaded with a fixed accumulation order, so results do
//! not depend on the number of worker threads; parallelism lives one level up,
//! across batch items and self-samples.

use serde::{Deserialize, Serialize};

/// Border handling for 3×3 windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Zero,
    /// Mirror without repeating the edge sample: index −1 reads index 1.
    Reflect,
}

/// Maps a possibly out-of-range index to a source index, or `None` for zero padding.
#[inline]
pub(crate) fn pad_index(i: isize, n: usize, padding: Padding) -> Option<usize> {
    if i >= 0 && (i as usize) < n {
        return Some(i as usize);
    }
    match padding {
        Padding::Zero => None,
        Padding::Reflect => {
            if n == 1 {
                return Some(0);
            }
            let last = n as isize - 1;
            let mut j = i;
            // a single reflection suffices for pads smaller than the image
            if j < 0 {
                j = -j;
            }
            if j > last {
                j = 2 * last - j;
            }
            Some(j.clamp(0, last) as usize)
        }
    }
}

/// Copies `[C, H, W]` into `[C, H+2p, W+2p]`.
pub(crate) fn pad(
    data: &[f64],
    c: usize,
    h: usize,
    w: usize,
    p: usize,
    padding: Padding,
) -> Vec<f64> {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; c * hp * wp];
    let cols: Vec<Option<usize>> = (0..wp)
        .map(|x| pad_index(x as isize - p as isize, w, padding))
        .collect();
    for ch in 0..c {
        let src = &data[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * hp * wp..(ch + 1) * hp * wp];
        for y in 0..hp {
            let Some(sy) = pad_index(y as isize - p as isize, h, padding) else {
                continue;
            };
            let row = &src[sy * w..(sy + 1) * w];
            let drow = &mut dst[y * wp..(y + 1) * wp];
            for (x, col) in cols.iter().enumerate() {
                if let Some(sx) = col {
                    drow[x] = row[*sx];
                }
            }
        }
    }
    out
}

/// Adjoint of [`pad`]: folds a padded gradient back onto the source grid.
pub(crate) fn unpad_adjoint(
    grad: &[f64],
    c: usize,
    h: usize,
    w: usize,
    p: usize,
    padding: Padding,
) -> Vec<f64> {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; c * h * w];
    let cols: Vec<Option<usize>> = (0..wp)
        .map(|x| pad_index(x as isize - p as isize, w, padding))
        .collect();
    for ch in 0..c {
        let src = &grad[ch * hp * wp..(ch + 1) * hp * wp];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..hp {
            let Some(sy) = pad_index(y as isize - p as isize, h, padding) else {
                continue;
            };
            for (x, col) in cols.iter().enumerate() {
                if let Some(sx) = col {
                    dst[sy * w + sx] += src[y * wp + x];
                }
            }
        }
    }
    out
}

/// Geometry of a square-kernel convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvShape {
    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn out_hw(&self) -> (usize, usize) {
        let p = self.pad();
        (
            (self.h + 2 * p - self.k) / self.stride + 1,
            (self.w + 2 * p - self.k) / self.stride + 1,
        )
    }

    fn padded_hw(&self) -> (usize, usize) {
        (self.h + 2 * self.pad(), self.w + 2 * self.pad())
    }
}

/// Output pixels per im2col tile; keeps the patch buffer cache-sized.
const TILE_PIXELS: usize = 2048;

/// Output-row ranges of the im2col tiles.
fn tiles(s: &ConvShape) -> impl Iterator<Item = (usize, usize)> {
    let (ho, wo) = s.out_hw();
    let rows = (TILE_PIXELS / wo.max(1)).max(1);
    (0..ho)
        .step_by(rows)
        .map(move |y0| (y0, (y0 + rows).min(ho)))
}

/// Unrolls output rows `y0..y1` of padded `[cin, hp, wp]` into
/// `[cin·k·k, (y1−y0)·wo]` patch columns.
fn im2col(s: &ConvShape, padded: &[f64], y0: usize, y1: usize, col: &mut Vec<f64>) {
    let (hp, wp) = s.padded_hw();
    let (_, wo) = s.out_hw();
    let (k, stride) = (s.k, s.stride);
    let n = (y1 - y0) * wo;
    col.clear();
    col.resize(s.cin * k * k * n, 0.0);
    for (r, dst) in col.chunks_mut(n).enumerate() {
        let (ci, ky, kx) = (r / (k * k), (r / k) % k, r % k);
        let plane = &padded[ci * hp * wp..(ci + 1) * hp * wp];
        for (oy, drow) in (y0..y1).zip(dst.chunks_mut(wo)) {
            let row = &plane[(oy * stride + ky) * wp + kx..];
            if stride == 1 {
                drow.copy_from_slice(&row[..wo]);
            } else {
                for (ox, d) in drow.iter_mut().enumerate() {
                    *d = row[ox * stride];
                }
            }
        }
    }
}

/// Adjoint of [`im2col`], accumulated into the padded gradient.
fn col2im(s: &ConvShape, col: &[f64], y0: usize, y1: usize, padded: &mut [f64]) {
    let (hp, wp) = s.padded_hw();
    let (_, wo) = s.out_hw();
    let (k, stride) = (s.k, s.stride);
    let n = (y1 - y0) * wo;
    for (r, src) in col.chunks(n).enumerate() {
        let (ci, ky, kx) = (r / (k * k), (r / k) % k, r % k);
        let plane = &mut padded[ci * hp * wp..(ci + 1) * hp * wp];
        for (oy, srow) in (y0..y1).zip(src.chunks(wo)) {
            let row = &mut plane[(oy * stride + ky) * wp + kx..];
            if stride == 1 {
                for (d, g) in row[..wo].iter_mut().zip(srow) {
                    *d += g;
                }
            } else {
                for (ox, g) in srow.iter().enumerate() {
                    row[ox * stride] += g;
                }
            }
        }
    }
}

/// Copies columns `c0..c0+nc` of a row-major `[m, n]` matrix.
fn column_block(a: &[f64], n: usize, c0: usize, nc: usize) -> Vec<f64> {
    a.chunks(n)
        .flat_map(|row| row[c0..c0 + nc].iter().copied())
        .collect()
}

/// Row-major `c = a·b` (`beta = 0`) or `c += a·b` (`beta = 1`), with optional
/// transposition of either operand. Single-threaded, so the summation order
/// is fixed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // elements of the checked slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward(
    s: &ConvShape,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let padded = pad(input, s.cin, s.h, s.w, s.pad(), s.padding);
    let (ho, wo) = s.out_hw();
    let n = ho * wo;
    let kk = s.cin * s.k * s.k;
    let mut out = vec![0.0; s.cout * n];
    let mut col = Vec::new();
    let mut block = Vec::new();
    for (y0, y1) in tiles(s) {
        im2col(s, &padded, y0, y1, &mut col);
        let nb = (y1 - y0) * wo;
        block.clear();
        block.resize(s.cout * nb, 0.0);
        gemm(s.cout, kk, nb, weight, false, &col, false, 0.0, &mut block);
        for (co, row) in block.chunks(nb).enumerate() {
            let b = bias.map_or(0.0, |b| b[co]);
            for (o, v) in out[co * n + y0 * wo..co * n + y1 * wo].iter_mut().zip(row) {
                *o = v + b;
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub(crate) fn conv2d_backward(
    s: &ConvShape,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let (ho, wo) = s.out_hw();
    let n = ho * wo;
    let kk = s.cin * s.k * s.k;
    let grad_bias: Vec<f64> = grad_out.chunks(n).map(|g| g.iter().sum()).collect();
    let padded = need_weight.then(|| pad(input, s.cin, s.h, s.w, s.pad(), s.padding));
    let (hp, wp) = s.padded_hw();
    let mut gw = need_weight.then(|| vec![0.0; s.cout * kk]);
    let mut gp = need_input.then(|| vec![0.0; s.cin * hp * wp]);
    let mut col = Vec::new();
    for (y0, y1) in tiles(s) {
        let nb = (y1 - y0) * wo;
        let g = column_block(grad_out, n, y0 * wo, nb);
        if let (Some(gw), Some(padded)) = (gw.as_mut(), padded.as_ref()) {
            im2col(s, padded, y0, y1, &mut col);
            gemm(s.cout, nb, kk, &g, false, &col, true, 1.0, gw);
        }
        if let Some(gp) = gp.as_mut() {
            col.clear();
            col.resize(kk * nb, 0.0);
            gemm(kk, s.cout, nb, weight, true, &g, false, 0.0, &mut col);
            col2im(s, &col, y0, y1, gp);
        }
    }
    let grad_input = gp.map(|gp| unpad_adjoint(&gp, s.cin, s.h, s.w, s.pad(), s.padding));
    (grad_input, gw, grad_bias)
}

/// 3×3 mean filter with reflection padding, per channel.
pub fn box3_reflect(data: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let padded = pad(data, c, h, w, 1, Padding::Reflect);
    let wp = w + 2;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = &padded[ch * (h + 2) * wp..(ch + 1) * (h + 2) * wp];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in 0..3 {
                    let row = &src[(y + dy) * wp + x..];
                    acc += row[0] + row[1] + row[2];
                }
                dst[y * w + x] = acc / 9.0;
            }
        }
    }
    out
}

pub(crate) fn box3_reflect_backward(grad: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let wp = w + 2;
    let mut gp = vec![0.0; c * (h + 2) * wp];
    for ch in 0..c {
        let g = &grad[ch * h * w..(ch + 1) * h * w];
        let dst = &mut gp[ch * (h + 2) * wp..(ch + 1) * (h + 2) * wp];
        for y in 0..h {
            for x in 0..w {
                let v = g[y * w + x] / 9.0;
                for dy in 0..3 {
                    let row = &mut dst[(y + dy) * wp + x..];
                    row[0] += v;
                    row[1] += v;
                    row[2] += v;
                }
            }
        }
    }
    unpad_adjoint(&gp, c, h, w, 1, Padding::Reflect)
}

pub(crate) fn upsample_nearest(data: &[f64], c: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            let src = &data[(ch * h + y / f) * w..];
            let dst = &mut out[(ch * ho + y) * wo..(ch * ho + y + 1) * wo];
            for (x, d) in dst.iter_mut().enumerate() {
                *d = src[x / f];
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward(
    grad: &[f64],
    c: usize,
    h: usize,
    w: usize,
    f: usize,
) -> Vec<f64> {
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..ho {
            let g = &grad[(ch * ho + y) * wo..(ch * ho + y + 1) * wo];
            let dst = &mut out[(ch * h + y / f) * w..];
            for (x, gv) in g.iter().enumerate() {
                dst[x / f] += gv;
            }
        }
    }
    out
}
