//! Depth error metrics, flip post-processing, and the static/dynamic,
//! shape/translation error decomposition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DepthMap;
use crate::losses::lower_median;
use crate::warp::{InstanceMask, ValidityMask};

/// Depth cap of the Make3D protocol.
pub const MAKE3D_MAX_DEPTH: f64 = 70.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub min_depth: f64,
    pub max_depth: f64,
    pub median_scaling: bool,
    /// Optional `[x0, y0, x1, y1)` evaluation rectangle.
    #[serde(default)]
    pub crop: Option<[usize; 4]>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            min_depth: 1e-3,
            max_depth: 80.0,
            median_scaling: true,
            crop: None,
        }
    }
}

impl EvalSettings {
    pub fn make3d() -> Self {
        Self {
            max_depth: MAKE3D_MAX_DEPTH,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_depth > 0.0 && self.max_depth > self.min_depth) {
            return Err(Error::invalid(format!(
                "need 0 < min_depth < max_depth, got {} and {}",
                self.min_depth, self.max_depth
            )));
        }
        if let Some([x0, y0, x1, y1]) = self.crop {
            if x0 >= x1 || y0 >= y1 {
                return Err(Error::invalid("crop rectangle is empty"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rms: f64,
    pub rms_log: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    /// Factor applied to the prediction before measuring (1 without median scaling).
    pub scale_factor: f64,
    /// Number of evaluated pixels.
    pub count: usize,
}

/// Per-metric differences between two [`DepthMetrics`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rms: f64,
    pub rms_log: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

impl MetricDelta {
    pub fn between(a: &DepthMetrics, b: &DepthMetrics) -> Self {
        Self {
            abs_rel: a.abs_rel - b.abs_rel,
            sq_rel: a.sq_rel - b.sq_rel,
            rms: a.rms - b.rms,
            rms_log: a.rms_log - b.rms_log,
            a1: a.a1 - b.a1,
            a2: a.a2 - b.a2,
            a3: a.a3 - b.a3,
        }
    }
}

fn check_sizes(pred: &DepthMap, gt: &DepthMap, valid: &ValidityMask) -> Result<()> {
    let (w, h) = (gt.width(), gt.height());
    if pred.width() != w || pred.height() != h || valid.width() != w || valid.height() != h {
        return Err(Error::shape(format!(
            "prediction {}x{}, ground truth {w}x{h}, mask {}x{}",
            pred.width(),
            pred.height(),
            valid.width(),
            valid.height()
        )));
    }
    Ok(())
}

/// Pixels that are marked valid, inside the crop, and whose ground truth
/// lies in `(min_depth, max_depth]`.
pub fn evaluation_mask(
    gt: &DepthMap,
    valid: &ValidityMask,
    settings: &EvalSettings,
) -> ValidityMask {
    let w = gt.width();
    let keep = gt
        .values()
        .iter()
        .zip(valid.values())
        .enumerate()
        .map(|(i, (g, v))| {
            let in_crop = settings.crop.is_none_or(|[x0, y0, x1, y1]| {
                (x0..x1).contains(&(i % w)) && (y0..y1).contains(&(i / w))
            });
            *v && in_crop && *g > settings.min_depth && *g <= settings.max_depth
        })
        .collect();
    ValidityMask::new(gt.width(), gt.height(), keep).expect("mask matches ground truth size")
}

fn pixels(pred: &[f64], gt: &[f64], mask: &ValidityMask) -> (Vec<f64>, Vec<f64>) {
    mask.values()
        .iter()
        .enumerate()
        .filter(|(_, m)| **m)
        .map(|(i, _)| (pred[i], gt[i]))
        .unzip()
}

/// Errors of `pred` against `gt` given as paired pixel lists; `pred` is
/// clamped into the depth range first.
fn metrics_of(
    pred: &[f64],
    gt: &[f64],
    settings: &EvalSettings,
    scale_factor: f64,
) -> DepthMetrics {
    let n = gt.len() as f64;
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log) = (0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for (p, g) in pred.iter().zip(gt) {
        let p = p.clamp(settings.min_depth, settings.max_depth);
        let d = p - g;
        abs_rel += d.abs() / g;
        sq_rel += d * d / g;
        sq += d * d;
        let l = p.ln() - g.ln();
        sq_log += l * l;
        let ratio = (p / g).max(g / p);
        for (i, t) in [1.25, 1.25f64.powi(2), 1.25f64.powi(3)].iter().enumerate() {
            if ratio < *t {
                hits[i] += 1;
            }
        }
    }
    DepthMetrics {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rms: (sq / n).sqrt(),
        rms_log: (sq_log / n).sqrt(),
        a1: hits[0] as f64 / n,
        a2: hits[1] as f64 / n,
        a3: hits[2] as f64 / n,
        scale_factor,
        count: gt.len(),
    }
}

fn median_ratio(pred: &[f64], gt: &[f64]) -> Result<f64> {
    let mp = lower_median(pred).ok_or_else(|| Error::degenerate("no pixels to scale"))?;
    let mg = lower_median(gt).expect("same length as pred");
    if !(mp > 0.0) {
        return Err(Error::degenerate(format!(
            "prediction median {mp} is not positive"
        )));
    }
    Ok(mg / mp)
}

pub fn compute_metrics(
    pred: &DepthMap,
    gt: &DepthMap,
    valid: &ValidityMask,
    settings: &EvalSettings,
) -> Result<DepthMetrics> {
    settings.validate()?;
    check_sizes(pred, gt, valid)?;
    let mask = evaluation_mask(gt, valid, settings);
    let (p, g) = pixels(pred.values(), gt.values(), &mask);
    if g.is_empty() {
        return Err(Error::degenerate(
            "no valid ground-truth pixels within the depth caps",
        ));
    }
    let factor = if settings.median_scaling {
        median_ratio(&p, &g)?
    } else {
        1.0
    };
    let scaled: Vec<f64> = p.iter().map(|v| v * factor).collect();
    Ok(metrics_of(&scaled, &g, settings, factor))
}

/// Blends a prediction with the un-flipped prediction of the mirrored
/// image. The left 5% of columns take the un-flipped prediction, the right
/// 5% the original, with linear ramps of the same width in between, and the
/// center uses the mean of both:
///
/// `l(x) = 1 − clip(20·(x − 0.05), 0, 1)`, `r(x) = l(1 − x)` for `x ∈ [0, 1]`
/// across the width, and `out = r·pred + l·unflipped + (1 − l − r)·mean`.
pub fn post_process(pred: &DepthMap, pred_of_flipped: &DepthMap) -> Result<DepthMap> {
    let (w, h) = (pred.width(), pred.height());
    if pred_of_flipped.width() != w || pred_of_flipped.height() != h {
        return Err(Error::shape("post-processing inputs differ in size"));
    }
    let ramp = |x: f64| 1.0 - (20.0 * (x - 0.05)).clamp(0.0, 1.0);
    let xs: Vec<f64> = (0..w)
        .map(|i| {
            if w == 1 {
                0.5
            } else {
                i as f64 / (w - 1) as f64
            }
        })
        .collect();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for (x, &t) in xs.iter().enumerate() {
            let a = pred.at(x, y);
            let b = pred_of_flipped.at(w - 1 - x, y);
            let l = ramp(t);
            let r = ramp(1.0 - t);
            out.push(r * a + l * b + (1.0 - l - r) * 0.5 * (a + b));
        }
    }
    DepthMap::with_holes(w, h, out)
}

/// Metrics per region; a region without pixels is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    #[serde(rename = "static")]
    pub static_region: Option<DepthMetrics>,
    pub dynamic: Option<DepthMetrics>,
    pub static_count: usize,
    pub dynamic_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionDecomposition {
    pub whole: DepthMetrics,
    /// Metrics after aligning each instance's median to its ground-truth median.
    pub shape: DepthMetrics,
    /// `whole − shape`, the convention of the reported tables.
    pub translation: MetricDelta,
    /// Metrics of the correction field: `|pred − pred_shape|` against ground truth.
    pub translation_residual: DepthMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub scale_factor: f64,
    #[serde(rename = "static")]
    pub static_region: Option<RegionDecomposition>,
    pub dynamic: Option<RegionDecomposition>,
}

fn check_instances(gt: &DepthMap, instances: &InstanceMask) -> Result<()> {
    if instances.width() != gt.width() || instances.height() != gt.height() {
        return Err(Error::shape(
            "instance mask differs in size from the depth maps",
        ));
    }
    Ok(())
}

/// Region masks `(static, dynamic)` partitioning the evaluation mask.
fn regions(mask: &ValidityMask, instances: &InstanceMask) -> (ValidityMask, ValidityMask) {
    let dynamic = instances.dynamic();
    let stat = ValidityMask::new(
        mask.width(),
        mask.height(),
        mask.values()
            .iter()
            .zip(dynamic.values())
            .map(|(m, d)| *m && !*d)
            .collect(),
    )
    .expect("same size");
    (stat, mask.and(&dynamic))
}

/// Global median scaling over the whole evaluation mask, then clamping.
fn scaled_prediction(
    pred: &DepthMap,
    gt: &DepthMap,
    mask: &ValidityMask,
    settings: &EvalSettings,
) -> Result<(Vec<f64>, f64)> {
    let (p, g) = pixels(pred.values(), gt.values(), mask);
    if g.is_empty() {
        return Err(Error::degenerate(
            "no valid ground-truth pixels within the depth caps",
        ));
    }
    let factor = if settings.median_scaling {
        median_ratio(&p, &g)?
    } else {
        1.0
    };
    let scaled = pred
        .values()
        .iter()
        .map(|v| (v * factor).clamp(settings.min_depth, settings.max_depth))
        .collect();
    Ok((scaled, factor))
}

pub fn static_dynamic_report(
    pred: &DepthMap,
    gt: &DepthMap,
    valid: &ValidityMask,
    instances: &InstanceMask,
    settings: &EvalSettings,
) -> Result<RegionMetrics> {
    settings.validate()?;
    check_sizes(pred, gt, valid)?;
    check_instances(gt, instances)?;
    let mask = evaluation_mask(gt, valid, settings);
    let (scaled, factor) = scaled_prediction(pred, gt, &mask, settings)?;
    let (stat, dynamic) = regions(&mask, instances);
    let region = |m: &ValidityMask| {
        let (p, g) = pixels(&scaled, gt.values(), m);
        (!g.is_empty()).then(|| metrics_of(&p, &g, settings, factor))
    };
    Ok(RegionMetrics {
        static_region: region(&stat),
        dynamic: region(&dynamic),
        static_count: stat.count(),
        dynamic_count: dynamic.count(),
    })
}

/// Splits the error of each region into a shape part, left after aligning
/// every instance's median depth to its ground truth, and a translation
/// part attributed to misplacing the instance as a whole.
pub fn decompose_errors(
    pred: &DepthMap,
    gt: &DepthMap,
    valid: &ValidityMask,
    instances: &InstanceMask,
    settings: &EvalSettings,
) -> Result<DecompositionReport> {
    settings.validate()?;
    check_sizes(pred, gt, valid)?;
    check_instances(gt, instances)?;
    let mask = evaluation_mask(gt, valid, settings);
    let (scaled, factor) = scaled_prediction(pred, gt, &mask, settings)?;

    let mut shaped = scaled.clone();
    for id in instances.instances() {
        let idx: Vec<usize> = (0..shaped.len())
            .filter(|&i| mask.is_valid(i) && instances.labels()[i] == id)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let p: Vec<f64> = idx.iter().map(|&i| scaled[i]).collect();
        let g: Vec<f64> = idx.iter().map(|&i| gt.values()[i]).collect();
        let f = median_ratio(&p, &g)?;
        for &i in &idx {
            shaped[i] = (scaled[i] * f).clamp(settings.min_depth, settings.max_depth);
        }
    }

    let (stat, dynamic) = regions(&mask, instances);
    let region = |m: &ValidityMask| -> Option<RegionDecomposition> {
        let (p, g) = pixels(&scaled, gt.values(), m);
        if g.is_empty() {
            return None;
        }
        let (ps, _) = pixels(&shaped, gt.values(), m);
        let whole = metrics_of(&p, &g, settings, factor);
        let shape = metrics_of(&ps, &g, settings, factor);
        Some(RegionDecomposition {
            whole,
            shape,
            translation: MetricDelta::between(&whole, &shape),
            translation_residual: residual_metrics(&p, &ps, &g, factor),
        })
    };
    Ok(DecompositionReport {
        scale_factor: factor,
        static_region: region(&stat),
        dynamic: region(&dynamic),
    })
}

/// Error metrics of the correction `pred − pred_shape`, normalized by
/// ground truth where the metric is relative; log and accuracy terms
/// compare `pred` with `pred_shape` directly.
fn residual_metrics(pred: &[f64], shaped: &[f64], gt: &[f64], factor: f64) -> DepthMetrics {
    let n = gt.len() as f64;
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log) = (0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for ((p, s), g) in pred.iter().zip(shaped).zip(gt) {
        let d = p - s;
        abs_rel += d.abs() / g;
        sq_rel += d * d / g;
        sq += d * d;
        let l = p.ln() - s.ln();
        sq_log += l * l;
        let ratio = (p / s).max(s / p);
        for (i, t) in [1.25, 1.25f64.powi(2), 1.25f64.powi(3)].iter().enumerate() {
            if ratio < *t {
                hits[i] += 1;
            }
        }
    }
    DepthMetrics {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rms: (sq / n).sqrt(),
        rms_log: (sq_log / n).sqrt(),
        a1: hits[0] as f64 / n,
        a2: hits[1] as f64 / n,
        a3: hits[2] as f64 / n,
        scale_factor: factor,
        count: gt.len(),
    }
}
