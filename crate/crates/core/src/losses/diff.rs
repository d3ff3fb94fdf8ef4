//! Tape versions of the losses. Each matches its counterpart in the parent
//! module value for value; per-pixel maps are `[1, H, W]` tensors.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::DepthMap;
use crate::warp::{Image, ValidityMask};

use super::{edge_weights, median_factor, IsslOptions, LossWeights, Reduction, SSIM_C1, SSIM_C2};

pub fn l1_map(t: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = t.sub(a, b)?;
    let d = t.abs(d);
    t.channel_mean(d)
}

pub fn ssim_map(t: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let mu_a = t.box_filter3(a)?;
    let mu_b = t.box_filter3(b)?;
    let aa = t.mul(a, a)?;
    let bb = t.mul(b, b)?;
    let ab = t.mul(a, b)?;
    let e_aa = t.box_filter3(aa)?;
    let e_bb = t.box_filter3(bb)?;
    let e_ab = t.box_filter3(ab)?;
    let ma2 = t.mul(mu_a, mu_a)?;
    let mb2 = t.mul(mu_b, mu_b)?;
    let mab = t.mul(mu_a, mu_b)?;
    let var_a = t.sub(e_aa, ma2)?;
    let var_b = t.sub(e_bb, mb2)?;
    let cov = t.sub(e_ab, mab)?;

    let n1 = t.mul_scalar(mab, 2.0);
    let n1 = t.add_scalar(n1, SSIM_C1);
    let n2 = t.mul_scalar(cov, 2.0);
    let n2 = t.add_scalar(n2, SSIM_C2);
    let num = t.mul(n1, n2)?;
    let d1 = t.add(ma2, mb2)?;
    let d1 = t.add_scalar(d1, SSIM_C1);
    let d2 = t.add(var_a, var_b)?;
    let d2 = t.add_scalar(d2, SSIM_C2);
    let den = t.mul(d1, d2)?;
    let ssim = t.div(num, den)?;

    let l = t.mul_scalar(ssim, -1.0);
    let l = t.add_scalar(l, 1.0);
    let l = t.mul_scalar(l, 0.5);
    let l = t.clamp(l, 0.0, 1.0);
    t.channel_mean(l)
}

pub fn photometric_map(t: &mut Tape, warped: Var, target: Var, alpha: f64) -> Result<Var> {
    let l1 = l1_map(t, warped, target)?;
    let ssim = ssim_map(t, warped, target)?;
    let l1 = t.mul_scalar(l1, alpha);
    let ssim = t.mul_scalar(ssim, 1.0 - alpha);
    t.add(l1, ssim)
}

/// Elementwise minimum; ties go to the earlier map.
pub fn min_reprojection(t: &mut Tape, maps: &[Var]) -> Result<Var> {
    let (&first, rest) = maps
        .split_first()
        .ok_or_else(|| Error::invalid("min_reprojection needs at least one map"))?;
    rest.iter().try_fold(first, |acc, &m| t.min(acc, m))
}

/// Edge-aware smoothness of a `[1, H, W]` depth against a constant image.
pub fn smoothness_loss(t: &mut Tape, depth: Var, image: &Image) -> Result<Var> {
    let (c, h, w) = t.value(depth).chw()?;
    if c != 1 || image.width() != w || image.height() != h {
        return Err(Error::shape("depth and image differ in size"));
    }
    if w < 2 || h < 2 {
        return Err(Error::shape(format!(
            "smoothness needs at least 2x2, got {w}x{h}"
        )));
    }
    let (ow, oh) = (w - 1, h - 1);
    let ones = t.constant(Tensor::full(&[1, h, w], 1.0));
    let inv = t.div(ones, depth)?;
    let mean = t.mean(inv);
    let mean = t.broadcast(mean, &[1, h, w])?;
    let dn = t.div(inv, mean)?;

    let base = t.crop(dn, 0, 0, oh, ow)?;
    let right = t.crop(dn, 0, 1, oh, ow)?;
    let below = t.crop(dn, 1, 0, oh, ow)?;
    let gx = t.sub(right, base)?;
    let gx = t.abs(gx);
    let gy = t.sub(below, base)?;
    let gy = t.abs(gy);

    let (wx, wy) = edge_weights(image);
    let wx = t.constant(Tensor::new(vec![1, oh, ow], wx)?);
    let wy = t.constant(Tensor::new(vec![1, oh, ow], wy)?);
    let ex = t.mul(gx, wx)?;
    let ey = t.mul(gy, wy)?;
    let e = t.add(ex, ey)?;
    Ok(t.mean(e))
}

/// Consistency between a re-estimated `[1, H, W]` depth and the generated
/// self-sample depth, which is a constant. The median factor is frozen.
pub fn issl_loss(
    t: &mut Tape,
    d_hat: Var,
    d_self: &DepthMap,
    mask: &ValidityMask,
    opts: &IsslOptions,
) -> Result<Var> {
    let n = mask.values().len();
    if t.value(d_hat).numel() != n || d_self.values().len() != n {
        return Err(Error::shape("consistency loss inputs differ in size"));
    }
    if mask.count() == 0 {
        return Err(Error::degenerate("consistency loss over an empty mask"));
    }
    let factor = if opts.median_scaling {
        t.frozen(|t| {
            median_factor(t.value(d_hat).data(), d_self.values(), mask).map_err(|e| e.to_string())
        })
        .map_err(Error::Degenerate)?
    } else {
        1.0
    };
    // masked pixels may hold zero depth; keep the filler positive so the
    // ratio stays finite there
    let filled: Vec<f64> = d_self
        .values()
        .iter()
        .zip(mask.values())
        .map(|(d, m)| if *m { *d } else { 1.0 })
        .collect();
    let shape = t.shape(d_hat).to_vec();
    let d = t.constant(Tensor::new(shape, filled)?);
    let s = t.mul_scalar(d_hat, factor);
    let num = t.sub(s, d)?;
    let num = t.abs(num);
    let den = t.add(s, d)?;
    let per = t.div(num, den)?;
    let m = mask.as_f64();
    match opts.reduction {
        Reduction::Mean => t.masked_mean(per, &m),
        Reduction::Sum => t.masked_sum(per, &m),
    }
}

/// `λ1·L_p + λ2·L_s + λ3·L_issl`; a missing consistency term counts as zero.
pub fn total_loss(
    t: &mut Tape,
    weights: &LossWeights,
    lp: Var,
    ls: Var,
    issl: Option<Var>,
) -> Result<Var> {
    let a = t.mul_scalar(lp, weights.lambda1);
    let b = t.mul_scalar(ls, weights.lambda2);
    let mut total = t.add(a, b)?;
    if let Some(i) = issl {
        let c = t.mul_scalar(i, weights.lambda3);
        total = t.add(total, c)?;
    }
    Ok(total)
}
