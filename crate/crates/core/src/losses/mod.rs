//! Photometric, smoothness and self-sample consistency losses.
//!
//! The functions here evaluate on plain images and depth maps. [`diff`]
//! builds the same quantities on an autodiff tape for training.

pub mod diff;

use serde::{Deserialize, Serialize};

use crate::autodiff::box3_reflect;
use crate::error::{Error, Result};
use crate::geometry::DepthMap;
use crate::warp::{Image, ValidityMask};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Weight of the L1 term against SSIM in the photometric loss.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.001,
            lambda3: 0.1,
            alpha: 0.15,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// How the per-pixel consistency terms are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Divide by the number of valid pixels.
    #[default]
    Mean,
    /// Plain sum over valid pixels.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IsslOptions {
    pub median_scaling: bool,
    pub reduction: Reduction,
}

impl Default for IsslOptions {
    fn default() -> Self {
        Self {
            median_scaling: true,
            reduction: Reduction::Mean,
        }
    }
}

/// Per-pixel nonnegative loss values.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelLossMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl PixelLossMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(format!(
                "{width}x{height} loss map needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid(format!(
                "loss values must be finite and >= 0, got {v}"
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::shape(format!(
            "images differ: {}x{}x{} vs {}x{}x{}",
            a.channels(),
            a.height(),
            a.width(),
            b.channels(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

fn channel_mean(data: &[f64], c: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for ch in 0..c {
        for (o, x) in out.iter_mut().zip(&data[ch * n..(ch + 1) * n]) {
            *o += x;
        }
    }
    for o in &mut out {
        *o /= c as f64;
    }
    out
}

/// Channel-averaged `|a − b|`.
pub fn l1_map(a: &Image, b: &Image) -> Result<PixelLossMap> {
    check_pair(a, b)?;
    let diff: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .collect();
    let n = a.width() * a.height();
    PixelLossMap::new(a.width(), a.height(), channel_mean(&diff, a.channels(), n))
}

/// Channel-averaged `(1 − SSIM)/2` over 3×3 reflect-padded windows, clamped to `[0, 1]`.
pub fn ssim_map(a: &Image, b: &Image) -> Result<PixelLossMap> {
    check_pair(a, b)?;
    let (c, h, w) = (a.channels(), a.height(), a.width());
    if h < 2 || w < 2 {
        return Err(Error::shape(format!(
            "SSIM needs at least 2x2 images, got {w}x{h}"
        )));
    }
    let (da, db) = (a.data(), b.data());
    let sq = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = box3_reflect(da, c, h, w);
    let mu_b = box3_reflect(db, c, h, w);
    let e_aa = box3_reflect(&sq(da, da), c, h, w);
    let e_bb = box3_reflect(&sq(db, db), c, h, w);
    let e_ab = box3_reflect(&sq(da, db), c, h, w);
    let per: Vec<f64> = (0..c * h * w)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (ma * mb * 2.0 + SSIM_C1) * (cov * 2.0 + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2);
            ((1.0 - num / den) * 0.5).clamp(0.0, 1.0)
        })
        .collect();
    PixelLossMap::new(w, h, channel_mean(&per, c, h * w))
}

/// `α·L1 + (1 − α)·SSIM` per pixel.
pub fn photometric_map(warped: &Image, target: &Image, alpha: f64) -> Result<PixelLossMap> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let l1 = l1_map(warped, target)?;
    let ssim = ssim_map(warped, target)?;
    let values = l1
        .values
        .iter()
        .zip(&ssim.values)
        .map(|(l, s)| l * alpha + s * (1.0 - alpha))
        .collect();
    PixelLossMap::new(l1.width, l1.height, values)
}

/// Elementwise minimum across sources.
pub fn min_reprojection(maps: &[PixelLossMap]) -> Result<PixelLossMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::invalid("min_reprojection needs at least one map"))?;
    let mut out = first.clone();
    for m in &maps[1..] {
        if m.width != out.width || m.height != out.height {
            return Err(Error::shape("loss maps differ in size"));
        }
        for (o, v) in out.values.iter_mut().zip(&m.values) {
            if *v < *o {
                *o = *v;
            }
        }
    }
    Ok(out)
}

/// Keeps a pixel iff the best warped reprojection beats the best unwarped
/// photometric loss, which drops pixels that move with the camera.
pub fn automask(
    target: &Image,
    sources: &[Image],
    warped_maps: &[PixelLossMap],
    alpha: f64,
) -> Result<ValidityMask> {
    let raw: Vec<PixelLossMap> = sources
        .iter()
        .map(|s| photometric_map(s, target, alpha))
        .collect::<Result<_>>()?;
    let raw_min = min_reprojection(&raw)?;
    let warped_min = min_reprojection(warped_maps)?;
    if warped_min.width != raw_min.width || warped_min.height != raw_min.height {
        return Err(Error::shape("warped loss maps and images differ in size"));
    }
    automask_from_minima(&warped_min, &raw_min)
}

pub(crate) fn automask_from_minima(
    warped_min: &PixelLossMap,
    raw_min: &PixelLossMap,
) -> Result<ValidityMask> {
    let keep = warped_min
        .values
        .iter()
        .zip(&raw_min.values)
        .map(|(w, r)| w < r)
        .collect();
    ValidityMask::new(raw_min.width, raw_min.height, keep)
}

/// Edge-aware smoothness of the mean-normalized inverse depth, averaged over
/// the `(H−1)·(W−1)` pixels that have both forward differences.
pub fn smoothness_loss(depth: &DepthMap, image: &Image) -> Result<f64> {
    let (w, h) = (depth.width(), depth.height());
    if image.width() != w || image.height() != h {
        return Err(Error::shape("depth and image differ in size"));
    }
    if w < 2 || h < 2 {
        return Err(Error::shape(format!(
            "smoothness needs at least 2x2, got {w}x{h}"
        )));
    }
    if depth.values().iter().any(|d| *d <= 0.0) {
        return Err(Error::invalid("smoothness needs strictly positive depth"));
    }
    let inv: Vec<f64> = depth.values().iter().map(|d| 1.0 / d).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    let dn: Vec<f64> = inv.iter().map(|v| v / mean).collect();
    let (wx, wy) = edge_weights(image);
    let (ow, oh) = (w - 1, h - 1);
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let i = y * w + x;
            let gx = (dn[i + 1] - dn[i]).abs();
            let gy = (dn[i + w] - dn[i]).abs();
            total += gx * wx[y * ow + x] + gy * wy[y * ow + x];
        }
    }
    Ok(total / (ow * oh) as f64)
}

/// `exp(−|∂I|)` for forward differences in x and y on the `(H−1)×(W−1)`
/// interior, with the gradient magnitude averaged over channels.
pub(crate) fn edge_weights(image: &Image) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let (ow, oh) = (w - 1, h - 1);
    let d = image.data();
    let mut gx = vec![0.0; ow * oh];
    let mut gy = vec![0.0; ow * oh];
    for ch in 0..c {
        let p = &d[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let i = y * w + x;
                gx[y * ow + x] += (p[i + 1] - p[i]).abs();
                gy[y * ow + x] += (p[i + w] - p[i]).abs();
            }
        }
    }
    let f = |g: Vec<f64>| g.into_iter().map(|v| (-(v / c as f64)).exp()).collect();
    (f(gx), f(gy))
}

/// Lower median (element `(n−1)/2` of the sorted values).
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    let k = (v.len() - 1) / 2;
    let (_, m, _) = v.select_nth_unstable_by(k, f64::total_cmp);
    Some(*m)
}

fn masked_values(d: &[f64], mask: &ValidityMask) -> Vec<f64> {
    d.iter()
        .zip(mask.values())
        .filter(|(_, m)| **m)
        .map(|(v, _)| *v)
        .collect()
}

/// `median(reference) / median(pred)` over the mask.
pub fn median_factor(pred: &[f64], reference: &[f64], mask: &ValidityMask) -> Result<f64> {
    if pred.len() != mask.values().len() || reference.len() != pred.len() {
        return Err(Error::shape("median scaling inputs differ in size"));
    }
    let mp = lower_median(&masked_values(pred, mask))
        .ok_or_else(|| Error::degenerate("median scaling over an empty mask"))?;
    let mr = lower_median(&masked_values(reference, mask)).unwrap_or(mp);
    if !(mp > 0.0) || !(mr > 0.0) {
        return Err(Error::degenerate(format!(
            "median scaling needs positive medians, got {mp} and {mr}"
        )));
    }
    Ok(mr / mp)
}

/// Scales `pred` so its median over the mask matches that of `reference`.
pub fn median_scale(
    pred: &DepthMap,
    reference: &DepthMap,
    mask: &ValidityMask,
) -> Result<(DepthMap, f64)> {
    let factor = median_factor(pred.values(), reference.values(), mask)?;
    Ok((pred.scaled(factor)?, factor))
}

/// Relative depth discrepancy `|d̂ − d| / (d̂ + d)` between the re-estimated
/// depth of a self-sample and its generated depth, over valid pixels.
pub fn issl_loss(
    d_hat: &DepthMap,
    d_self: &DepthMap,
    mask: &ValidityMask,
    opts: &IsslOptions,
) -> Result<f64> {
    if d_hat.values().len() != mask.values().len() || d_self.values().len() != mask.values().len() {
        return Err(Error::shape("consistency loss inputs differ in size"));
    }
    let count = mask.count();
    if count == 0 {
        return Err(Error::degenerate("consistency loss over an empty mask"));
    }
    let factor = if opts.median_scaling {
        median_factor(d_hat.values(), d_self.values(), mask)?
    } else {
        1.0
    };
    let mut total = 0.0;
    for ((p, d), m) in d_hat
        .values()
        .iter()
        .zip(d_self.values())
        .zip(mask.values())
    {
        if *m {
            let s = p * factor;
            total += (s - d).abs() / (s + d);
        }
    }
    Ok(match opts.reduction {
        Reduction::Mean => total / count as f64,
        Reduction::Sum => total,
    })
}

/// Loss terms before weighting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub photometric: f64,
    pub smoothness: f64,
    pub issl: f64,
}

/// `λ1·L_p + λ2·L_s + λ3·L_issl`.
pub fn total_loss(weights: &LossWeights, parts: &LossParts) -> f64 {
    weights.lambda1 * parts.photometric
        + weights.lambda2 * parts.smoothness
        + weights.lambda3 * parts.issl
}
