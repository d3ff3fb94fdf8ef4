//! Isometric self-samples: new views of a single image synthesized by moving
//! its estimated point cloud with a random rigid motion.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthMap, RigidMotion, DEFAULT_Z_MIN};
use crate::rng::{self, Stream};
use crate::warp::{self, Image, ValidityMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionDistribution {
    /// Each component uniform on `[−bound, bound]`.
    #[default]
    Uniform,
    /// Zero-mean normal with σ = bound/2, clipped to `±bound`.
    Gaussian,
}

/// Where the depth of a self-sample comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfDepthSource {
    /// Bilinearly resampled from the source depth map, like the image.
    #[default]
    Sampled,
    /// The camera-frame z of each transformed point.
    TransformedZ,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Per-axis rotation bound (radians) at the first epoch.
    pub theta_r_start: f64,
    /// Per-axis rotation bound (radians) at the last epoch.
    pub theta_r_end: f64,
    /// Per-axis translation bound (meters).
    pub theta_t: f64,
    pub n_k: usize,
    pub distribution: MotionDistribution,
    pub total_epochs: usize,
    #[serde(default)]
    pub depth_source: SelfDepthSource,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            theta_r_start: 0.005,
            theta_r_end: 0.2,
            theta_t: 0.005,
            n_k: 4,
            distribution: MotionDistribution::Uniform,
            total_epochs: 20,
            depth_source: SelfDepthSource::Sampled,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bounds = [self.theta_r_start, self.theta_r_end, self.theta_t];
        if bounds.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::invalid("motion bounds must be finite and >= 0"));
        }
        if self.theta_r_start > self.theta_r_end {
            return Err(Error::invalid(format!(
                "rotation bound must not shrink: start {} > end {}",
                self.theta_r_start, self.theta_r_end
            )));
        }
        if self.n_k == 0 {
            return Err(Error::invalid("n_k must be at least 1"));
        }
        if self.total_epochs == 0 {
            return Err(Error::invalid("total_epochs must be at least 1"));
        }
        Ok(())
    }

    /// Rotation bound at `epoch`, linear from start (first epoch) to end (last epoch).
    pub fn theta_r_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::invalid(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        if self.total_epochs == 1 {
            return Ok(self.theta_r_start);
        }
        let f = epoch as f64 / (self.total_epochs - 1) as f64;
        // exact at both ends
        Ok(self.theta_r_start * (1.0 - f) + self.theta_r_end * f)
    }

    pub fn sample_motion<R: Rng + ?Sized>(&self, epoch: usize, rng: &mut R) -> Result<RigidMotion> {
        let tr = self.theta_r_at(epoch)?;
        let tt = self.theta_t;
        let mut draw = |bound: f64| -> f64 {
            if bound == 0.0 {
                return 0.0;
            }
            match self.distribution {
                MotionDistribution::Uniform => rng.random_range(-bound..=bound),
                MotionDistribution::Gaussian => {
                    let n = Normal::new(0.0, bound / 2.0).expect("positive finite sigma");
                    n.sample(rng).clamp(-bound, bound)
                }
            }
        };
        let r = [draw(tr), draw(tr), draw(tr)];
        let t = [draw(tt), draw(tt), draw(tt)];
        RigidMotion::new(r, t)
    }
}

/// A synthesized view with its depth, validity and generating motion.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfSample {
    pub image: Image,
    /// Zero where `validity` is 0.
    pub depth: DepthMap,
    pub validity: ValidityMask,
    pub motion: RigidMotion,
}

/// Resamples `image` and `depth` at the projection of the point cloud moved by `motion`.
pub fn generate_self_sample(
    image: &Image,
    depth: &DepthMap,
    motion: &RigidMotion,
    k: &CameraIntrinsics,
    source: SelfDepthSource,
) -> Result<SelfSample> {
    let (w, h) = (image.width(), image.height());
    if depth.width() != w || depth.height() != h {
        return Err(Error::shape(format!(
            "image {w}x{h} vs depth {}x{}",
            depth.width(),
            depth.height()
        )));
    }
    let projection = warp::correspondence_grid(depth, motion, k, DEFAULT_Z_MIN);
    let grid = &projection.grid;
    let validity = warp::validity(grid, w, h);
    let sampled = warp::bilinear_sample(image, grid);
    let depth_values: Vec<f64> = match source {
        SelfDepthSource::Sampled => warp::bilinear_sample_depth(depth, grid).into_values(),
        SelfDepthSource::TransformedZ => projection.z.clone(),
    };
    let depth_values = depth_values
        .iter()
        .zip(validity.values())
        .map(|(d, v)| if *v && *d > 0.0 { *d } else { 0.0 })
        .collect::<Vec<_>>();
    // a valid pixel whose blended depth touched a hole carries no usable depth
    let validity = ValidityMask::new(w, h, depth_values.iter().map(|d| *d > 0.0).collect())?;
    Ok(SelfSample {
        image: sampled,
        depth: DepthMap::with_holes(w, h, depth_values)?,
        validity,
        motion: *motion,
    })
}

/// `n_k` self-samples of one image; sample `i` draws its motion from its own
/// stream derived from `(seed, i)`.
pub fn generate_batch(
    image: &Image,
    depth: &DepthMap,
    k: &CameraIntrinsics,
    config: &SamplerConfig,
    epoch: usize,
    seed: u64,
) -> Result<Vec<SelfSample>> {
    config.validate()?;
    (0..config.n_k)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, Stream::SelfSample, &[i as u64]);
            let m = config.sample_motion(epoch, &mut r)?;
            generate_self_sample(image, depth, &m, k, config.depth_source)
        })
        .collect()
}
