//! Bilinear sampling and inverse-warp view synthesis.
//!
//! Sampling is a gather: each output pixel reads the source at a continuous
//! coordinate. Coordinates outside `[0, W−1]×[0, H−1]` or flagged as NaN
//! read as zero and are marked invalid, never clamped to the border.

use crate::error::{Error, Result};
use crate::geometry::{self, CameraIntrinsics, DepthMap, RigidMotion, DEFAULT_Z_MIN};

/// Planar (channel-major) image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "images need 1 or 3 channels, got {channels}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::shape(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if let Some(x) = data
            .iter()
            .find(|x| !(x.is_finite() && (0.0..=1.0).contains(*x)))
        {
            return Err(Error::invalid(format!(
                "image values must lie in [0,1], got {x}"
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds from values already known to be in range (kernel outputs).
    pub(crate) fn from_raw(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height * channels);
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, u: usize, v: usize) -> f64 {
        self.data[(c * self.height + v) * self.width + u]
    }

    /// Mirror about the vertical axis.
    pub fn flip_horizontal(&self) -> Image {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        Image::from_raw(self.width, self.height, self.channels, data)
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }
}

/// Per-pixel continuous sampling coordinates `(u, v)`; NaN marks a flagged pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid {
    width: usize,
    height: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl SampleGrid {
    pub fn from_parts(width: usize, height: usize, u: Vec<f64>, v: Vec<f64>) -> Self {
        assert_eq!(u.len(), width * height);
        assert_eq!(v.len(), width * height);
        Self {
            width,
            height,
            u,
            v,
        }
    }

    /// The integer pixel grid.
    pub fn identity(width: usize, height: usize) -> Self {
        let mut u = Vec::with_capacity(width * height);
        let mut v = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                u.push(x as f64);
                v.push(y as f64);
            }
        }
        Self {
            width,
            height,
            u,
            v,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn offset(&self, du: f64, dv: f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            u: self.u.iter().map(|x| x + du).collect(),
            v: self.v.iter().map(|x| x + dv).collect(),
        }
    }
}

/// Binary per-pixel validity.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidityMask {
    width: usize,
    height: usize,
    valid: Vec<bool>,
}

impl ValidityMask {
    pub fn new(width: usize, height: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != width * height {
            return Err(Error::shape(format!(
                "{width}x{height} mask needs {} values, got {}",
                width * height,
                valid.len()
            )));
        }
        Ok(Self {
            width,
            height,
            valid,
        })
    }

    pub fn all(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            valid: vec![true; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.valid.len() as f64
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.valid
            .iter()
            .map(|&v| if v { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn and(&self, other: &ValidityMask) -> ValidityMask {
        Self {
            width: self.width,
            height: self.height,
            valid: self
                .valid
                .iter()
                .zip(&other.valid)
                .map(|(a, b)| *a && *b)
                .collect(),
        }
    }
}

/// Per-pixel integer labels; 0 is static background.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    width: usize,
    height: usize,
    labels: Vec<u16>,
}

impl InstanceMask {
    pub fn new(width: usize, height: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::shape(format!(
                "{width}x{height} instance mask needs {} labels, got {}",
                width * height,
                labels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    /// Sorted distinct nonzero labels.
    pub fn instances(&self) -> Vec<u16> {
        let mut ids: Vec<u16> = self.labels.iter().copied().filter(|l| *l != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Pixels carrying any nonzero label.
    pub fn dynamic(&self) -> ValidityMask {
        ValidityMask {
            width: self.width,
            height: self.height,
            valid: self.labels.iter().map(|l| *l != 0).collect(),
        }
    }
}

/// The bilinear cell containing a sampling coordinate.
///
/// Interior integer coordinates belong to the cell on their right (and
/// below); the last column and row belong to the cell on their left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Cell {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
}

/// Slack allowed outside the image border, so that coordinates which are
/// on the border up to rounding (e.g. after an identity warp) stay valid.
pub const EDGE_TOLERANCE: f64 = 1e-9;

#[inline]
pub(crate) fn in_bounds(u: f64, v: f64, width: usize, height: usize) -> bool {
    // NaN fails every comparison
    u >= -EDGE_TOLERANCE
        && v >= -EDGE_TOLERANCE
        && u <= (width - 1) as f64 + EDGE_TOLERANCE
        && v <= (height - 1) as f64 + EDGE_TOLERANCE
}

#[inline]
fn axis(c: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let c = c.clamp(0.0, (n - 1) as f64);
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, i0 + 1, c - i0 as f64)
}

#[inline]
pub(crate) fn cell(u: f64, v: f64, width: usize, height: usize) -> Option<Cell> {
    if !in_bounds(u, v, width, height) {
        return None;
    }
    let (x0, x1, fx) = axis(u, width);
    let (y0, y1, fy) = axis(v, height);
    Some(Cell {
        x0,
        x1,
        y0,
        y1,
        fx,
        fy,
    })
}

impl Cell {
    #[inline]
    pub fn sample(&self, plane: &[f64], width: usize) -> f64 {
        let p00 = plane[self.y0 * width + self.x0];
        let p01 = plane[self.y0 * width + self.x1];
        let p10 = plane[self.y1 * width + self.x0];
        let p11 = plane[self.y1 * width + self.x1];
        let top = p00 + self.fx * (p01 - p00);
        let bottom = p10 + self.fx * (p11 - p10);
        top + self.fy * (bottom - top)
    }

    /// `(∂/∂u, ∂/∂v)` of [`Cell::sample`]; zero along a degenerate axis.
    #[inline]
    pub fn gradient(&self, plane: &[f64], width: usize) -> (f64, f64) {
        let p00 = plane[self.y0 * width + self.x0];
        let p01 = plane[self.y0 * width + self.x1];
        let p10 = plane[self.y1 * width + self.x0];
        let p11 = plane[self.y1 * width + self.x1];
        let du = (1.0 - self.fy) * (p01 - p00) + self.fy * (p11 - p10);
        let top = p00 + self.fx * (p01 - p00);
        let bottom = p10 + self.fx * (p11 - p10);
        (du, bottom - top)
    }

    /// Corner weights in the order 00, 01, 10, 11.
    #[inline]
    pub fn weights(&self) -> [(usize, usize, f64); 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (self.x0, self.y0, (1.0 - fx) * (1.0 - fy)),
            (self.x1, self.y0, fx * (1.0 - fy)),
            (self.x0, self.y1, (1.0 - fx) * fy),
            (self.x1, self.y1, fx * fy),
        ]
    }
}

/// Samples every plane of a planar buffer at the grid; invalid coordinates
/// read as zero.
pub(crate) fn sample_planes(
    data: &[f64],
    width: usize,
    height: usize,
    channels: usize,
    gu: &[f64],
    gv: &[f64],
) -> Vec<f64> {
    let n_in = width * height;
    let n_out = gu.len();
    let mut out = vec![0.0; n_out * channels];
    for (i, (&u, &v)) in gu.iter().zip(gv).enumerate() {
        if let Some(c) = cell(u, v, width, height) {
            for ch in 0..channels {
                out[ch * n_out + i] = c.sample(&data[ch * n_in..(ch + 1) * n_in], width);
            }
        }
    }
    out
}

pub fn bilinear_sample(image: &Image, grid: &SampleGrid) -> Image {
    let data = sample_planes(
        &image.data,
        image.width,
        image.height,
        image.channels,
        &grid.u,
        &grid.v,
    );
    Image::from_raw(grid.width, grid.height, image.channels, data)
}

/// Bilinear sampling of a depth map; invalid coordinates read as zero (holes).
pub fn bilinear_sample_depth(depth: &DepthMap, grid: &SampleGrid) -> DepthMap {
    let data = sample_planes(
        depth.values(),
        depth.width(),
        depth.height(),
        1,
        &grid.u,
        &grid.v,
    );
    DepthMap::with_holes(grid.width, grid.height, data)
        .expect("bilinear blend of non-negative depths")
}

/// 1 where both coordinates are finite and inside `[0, W−1]×[0, H−1]`
/// (up to [`EDGE_TOLERANCE`]).
pub fn validity(grid: &SampleGrid, width: usize, height: usize) -> ValidityMask {
    ValidityMask {
        width: grid.width,
        height: grid.height,
        valid: grid
            .u
            .iter()
            .zip(&grid.v)
            .map(|(&u, &v)| in_bounds(u, v, width, height))
            .collect(),
    }
}

/// A source view warped into the target view.
#[derive(Debug, Clone)]
pub struct WarpedView {
    pub image: Image,
    pub mask: ValidityMask,
    pub grid: SampleGrid,
}

/// Warps `source` into the target view given the target depth and the
/// target-to-source motion.
pub fn synthesize_view(
    source: &Image,
    target_depth: &DepthMap,
    motion: &RigidMotion,
    k: &CameraIntrinsics,
) -> Result<WarpedView> {
    synthesize_view_with_near(source, target_depth, motion, k, DEFAULT_Z_MIN)
}

pub fn synthesize_view_with_near(
    source: &Image,
    target_depth: &DepthMap,
    motion: &RigidMotion,
    k: &CameraIntrinsics,
    z_min: f64,
) -> Result<WarpedView> {
    if source.width != target_depth.width() || source.height != target_depth.height() {
        return Err(Error::shape(format!(
            "source {}x{} vs depth {}x{}",
            source.width,
            source.height,
            target_depth.width(),
            target_depth.height()
        )));
    }
    let grid = correspondence_grid(target_depth, motion, k, z_min).grid;
    let image = bilinear_sample(source, &grid);
    let mask = validity(&grid, source.width, source.height);
    Ok(WarpedView { image, mask, grid })
}

/// `project(transform(lift(depth), M(motion)))`.
pub fn correspondence_grid(
    depth: &DepthMap,
    motion: &RigidMotion,
    k: &CameraIntrinsics,
    z_min: f64,
) -> geometry::Projection {
    let cloud = geometry::lift(depth, k);
    let moved = geometry::transform_points(&cloud, &geometry::motion_to_matrix(motion));
    geometry::project_with_near(&moved, k, z_min)
}
