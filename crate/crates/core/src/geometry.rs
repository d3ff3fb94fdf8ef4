//! Pinhole camera and rigid-body math.
//!
//! Pixel coordinates address pixel centers: column `u` and row `v` of a
//! depth map sit at integer image coordinates, with no half-pixel offset.
//! Depth maps and point clouds are stored row-major.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};
use crate::warp::SampleGrid;

/// Points at or in front of this depth (meters) are not projected.
pub const DEFAULT_Z_MIN: f64 = 1e-3;

const SMALL_ANGLE: f64 = 1e-8;

/// Pinhole intrinsics with zero skew.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.fx, self.fy, self.cx, self.cy];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("intrinsics must be finite"));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Closed-form inverse of [`Self::matrix`].
    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Viewing ray `K⁻¹ (u, v, 1)ᵀ` through a pixel; its z component is 1.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }

    /// Reads `{"fx":..,"fy":..,"cx":..,"cy":..}`.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let k: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        k.validate()
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(k)
    }

    /// Intrinsics for an image of a different resolution.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
        }
    }
}

/// Per-pixel metric depth, row-major.
///
/// Maps built with [`DepthMap::new`] are strictly positive. Maps built with
/// [`DepthMap::with_holes`] may hold zeros marking pixels without depth, as
/// produced by resampling under a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        check_len(width, height, values.len())?;
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(Error::invalid(format!(
                "depth must be positive and finite, got {v} at index {i}"
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn with_holes(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        check_len(width, height, values.len())?;
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(Error::invalid(format!(
                "depth must be non-negative and finite, got {v} at index {i}"
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Result<Self> {
        Self::new(width, height, vec![depth; width * height])
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

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.width + u]
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::with_holes(
            self.width,
            self.height,
            self.values.iter().map(|d| d * factor).collect(),
        )
    }
}

fn check_len(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::shape(format!("empty map {width}x{height}")));
    }
    if width * height != len {
        return Err(Error::shape(format!(
            "{width}x{height} map needs {} values, got {len}",
            width * height
        )));
    }
    Ok(())
}

/// Per-pixel 3D points in the camera frame, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vector3<f64>>,
}

/// A 6-DoF rigid motion: axis-angle rotation (radians) and translation (meters).
///
/// The rotation is kept canonical, with magnitude at most π.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigidMotion {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl RigidMotion {
    pub fn new(rotation: [f64; 3], translation: [f64; 3]) -> Result<Self> {
        if rotation
            .iter()
            .chain(translation.iter())
            .any(|x| !x.is_finite())
        {
            return Err(Error::invalid("rigid motion components must be finite"));
        }
        Ok(Self {
            rotation: canonical_axis_angle(rotation),
            translation,
        })
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self {
            rotation: [0.0; 3],
            translation: t,
        }
    }

    /// The six free parameters `(rx, ry, rz, tx, ty, tz)`.
    pub fn to_array(&self) -> [f64; 6] {
        let r = self.rotation;
        let t = self.translation;
        [r[0], r[1], r[2], t[0], t[1], t[2]]
    }

    pub fn from_slice(p: &[f64]) -> Result<Self> {
        if p.len() != 6 {
            return Err(Error::shape(format!(
                "motion needs 6 values, got {}",
                p.len()
            )));
        }
        Self::new([p[0], p[1], p[2]], [p[3], p[4], p[5]])
    }

    pub fn is_zero(&self) -> bool {
        self.rotation == [0.0; 3] && self.translation == [0.0; 3]
    }
}

/// Reduces the rotation angle into (−π, π] along the same axis.
fn canonical_axis_angle(r: [f64; 3]) -> [f64; 3] {
    let theta = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    if theta <= PI {
        return r;
    }
    let two_pi = 2.0 * PI;
    let mut reduced = theta - two_pi * (theta / two_pi).round();
    if reduced <= -PI {
        reduced += two_pi;
    }
    let s = reduced / theta;
    [r[0] * s, r[1] * s, r[2] * s]
}

/// A 4×4 homogeneous rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformMatrix(Matrix4<f64>);

impl TransformMatrix {
    pub fn identity() -> Self {
        Self(Matrix4::identity())
    }

    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn compose(&self, other: &TransformMatrix) -> TransformMatrix {
        let mut m = self.0 * other.0;
        m[(3, 0)] = 0.0;
        m[(3, 1)] = 0.0;
        m[(3, 2)] = 0.0;
        m[(3, 3)] = 1.0;
        TransformMatrix(m)
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let m = &self.0;
        Vector3::new(
            m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)] * p.z + m[(0, 3)],
            m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)] * p.z + m[(1, 3)],
            m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)] * p.z + m[(2, 3)],
        )
    }
}

/// Rodrigues' formula.
pub fn axis_angle_to_matrix(aa: [f64; 3]) -> Result<Matrix3<f64>> {
    if aa.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("axis-angle components must be finite"));
    }
    Ok(rodrigues(&Vector3::from(aa)))
}

fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

pub(crate) fn rodrigues(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = skew(w);
    Matrix3::identity() + k * a + k * k * b
}

/// Partial derivatives `∂R/∂ω_i` of the Rodrigues map.
pub(crate) fn rodrigues_jacobian(w: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let theta2 = w.norm_squared();
    let basis = [Vector3::x(), Vector3::y(), Vector3::z()];
    if theta2.sqrt() < 1e-6 {
        // second-order series of R = I + [w] + [w]²/2
        let k = skew(w);
        return basis.map(|e| {
            let ke = skew(&e);
            ke + (ke * k + k * ke) * 0.5
        });
    }
    let r = rodrigues(w);
    let k = skew(w);
    let i_minus_r = Matrix3::identity() - r;
    basis.map(|e| {
        let wi = w.dot(&e);
        let cross = w.cross(&(i_minus_r * e));
        (k * wi + skew(&cross)) * r / theta2
    })
}

pub fn motion_to_matrix(m: &RigidMotion) -> TransformMatrix {
    let r = rodrigues(&Vector3::from(m.rotation));
    TransformMatrix::from_parts(r, Vector3::from(m.translation))
}

/// The motion whose matrix is the inverse of `motion_to_matrix(m)`.
pub fn invert_motion(m: &RigidMotion) -> RigidMotion {
    let r = rodrigues(&Vector3::from(m.rotation));
    let t = -(r.transpose() * Vector3::from(m.translation));
    let w = m.rotation;
    RigidMotion {
        rotation: canonical_axis_angle([-w[0], -w[1], -w[2]]),
        translation: [t.x, t.y, t.z],
    }
}

/// Composition `a ∘ b` (apply `b` first).
pub fn compose_motions(a: &RigidMotion, b: &RigidMotion) -> RigidMotion {
    let m = motion_to_matrix(a).compose(&motion_to_matrix(b));
    let t = m.translation();
    RigidMotion {
        rotation: matrix_to_axis_angle(&m.rotation()),
        translation: [t.x, t.y, t.z],
    }
}

/// Inverse of Rodrigues' formula, returning the canonical representative.
pub fn matrix_to_axis_angle(r: &Matrix3<f64>) -> [f64; 3] {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let v = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    if theta < 1e-7 {
        return [v.x * 0.5, v.y * 0.5, v.z * 0.5];
    }
    if PI - theta < 1e-6 {
        // near π the antisymmetric part vanishes; read the axis off R + I
        let b = (r + Matrix3::identity()) * 0.5;
        let col = (0..3)
            .max_by(|&i, &j| b[(i, i)].total_cmp(&b[(j, j)]))
            .unwrap_or(0);
        let mut axis = b.column(col).into_owned();
        axis /= axis.norm();
        if axis.dot(&v) < 0.0 {
            axis = -axis;
        }
        return [axis.x * theta, axis.y * theta, axis.z * theta];
    }
    let s = theta / (2.0 * theta.sin());
    [v.x * s, v.y * s, v.z * s]
}

/// `p(u,v) = D(u,v) · K⁻¹ (u, v, 1)ᵀ`.
pub fn lift(depth: &DepthMap, k: &CameraIntrinsics) -> PointCloud {
    let (w, h) = (depth.width, depth.height);
    let mut points = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            let d = depth.values[v * w + u];
            let ray = k.ray(u as f64, v as f64);
            points.push(Vector3::new(d * ray[0], d * ray[1], d));
        }
    }
    PointCloud {
        width: w,
        height: h,
        points,
    }
}

pub fn transform_points(cloud: &PointCloud, m: &TransformMatrix) -> PointCloud {
    PointCloud {
        width: cloud.width,
        height: cloud.height,
        points: cloud.points.iter().map(|p| m.apply(p)).collect(),
    }
}

/// Result of projecting a point cloud: a per-pixel sampling grid plus the
/// camera-frame depth of each projected point.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub grid: SampleGrid,
    pub z: Vec<f64>,
}

#[inline]
pub(crate) fn project_point(p: &[f64; 3], k: &CameraIntrinsics, z_min: f64) -> (f64, f64) {
    if p[2] <= z_min || !p[2].is_finite() {
        (f64::NAN, f64::NAN)
    } else {
        (k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy)
    }
}

pub fn project(cloud: &PointCloud, k: &CameraIntrinsics) -> Projection {
    project_with_near(cloud, k, DEFAULT_Z_MIN)
}

/// Projects onto the image plane; points with `z <= z_min` get a NaN
/// (flagged) coordinate.
pub fn project_with_near(cloud: &PointCloud, k: &CameraIntrinsics, z_min: f64) -> Projection {
    let n = cloud.points.len();
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    for p in &cloud.points {
        let (pu, pv) = project_point(&[p.x, p.y, p.z], k, z_min);
        u.push(pu);
        v.push(pv);
        z.push(p.z);
    }
    Projection {
        grid: SampleGrid::from_parts(cloud.width, cloud.height, u, v),
        z,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn random_motion(seed: u64) -> RigidMotion {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut c = || rng.random_range(-1.0..1.0);
        RigidMotion::new([c(), c(), c()], [c() * 3.0, c() * 3.0, c() * 3.0]).unwrap()
    }

    #[test]
    fn zero_rotation_is_identity() {
        assert_eq!(axis_angle_to_matrix([0.0; 3]).unwrap(), Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = axis_angle_to_matrix([0.0, 0.0, FRAC_PI_2]).unwrap();
        let p = r * Vector3::new(1.0, 0.0, 0.0);
        assert_relative_eq!(p, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn non_finite_rotation_rejected() {
        assert!(axis_angle_to_matrix([f64::NAN, 0.0, 0.0]).is_err());
        assert!(RigidMotion::new([0.0; 3], [f64::INFINITY, 0.0, 0.0]).is_err());
    }

    #[test]
    fn small_angle_branch_matches_general() {
        // Evaluate the general closed form at 1e-6 by hand and compare to the
        // Taylor branch's value at the same point.
        let w = Vector3::new(0.6e-6, -0.48e-6, 0.64e-6);
        let theta = w.norm();
        let k = skew(&w);
        let general = Matrix3::identity()
            + k * (theta.sin() / theta)
            + k * k * ((1.0 - theta.cos()) / (theta * theta));
        let taylor = Matrix3::identity()
            + k * (1.0 - theta * theta / 6.0)
            + k * k * (0.5 - theta * theta / 24.0);
        assert_relative_eq!(general, taylor, max_relative = 1e-8);
        let tiny = rodrigues(&(w * 1e-3));
        assert_relative_eq!(
            tiny,
            Matrix3::identity() + skew(&(w * 1e-3)),
            epsilon = 1e-18
        );
    }

    #[test]
    fn canonical_rotation_magnitude() {
        let m = RigidMotion::new([0.0, 0.0, 3.0 * PI / 2.0], [0.0; 3]).unwrap();
        assert_relative_eq!(m.rotation[2], -FRAC_PI_2, epsilon = 1e-12);
        let r1 = axis_angle_to_matrix([0.0, 0.0, 3.0 * PI / 2.0]).unwrap();
        let r2 = axis_angle_to_matrix(m.rotation).unwrap();
        assert_relative_eq!(r1, r2, epsilon = 1e-12);
        let pi = RigidMotion::new([PI, 0.0, 0.0], [0.0; 3]).unwrap();
        assert_eq!(pi.rotation, [PI, 0.0, 0.0]);
    }

    #[test]
    fn motion_matrix_cases() {
        assert_eq!(
            *motion_to_matrix(&RigidMotion::identity()).matrix(),
            Matrix4::identity()
        );
        let t = motion_to_matrix(&RigidMotion::translation([1.0, 2.0, 3.0]));
        assert_eq!(t.rotation(), Matrix3::identity());
        assert_eq!(
            t.matrix().column(3).into_owned(),
            nalgebra::Vector4::new(1.0, 2.0, 3.0, 1.0)
        );
    }

    #[test]
    fn inverse_motion_cases() {
        assert_eq!(
            invert_motion(&RigidMotion::identity()),
            RigidMotion::identity()
        );
        let inv = invert_motion(&RigidMotion::translation([1.0, -2.0, 0.5]));
        assert_eq!(inv.translation, [-1.0, 2.0, -0.5]);
        for seed in 0..20 {
            let m = random_motion(seed);
            let prod = motion_to_matrix(&invert_motion(&m)).compose(&motion_to_matrix(&m));
            assert_relative_eq!(*prod.matrix(), Matrix4::identity(), epsilon = 1e-10);
            let direct = motion_to_matrix(&m).matrix().try_inverse().unwrap();
            assert_relative_eq!(
                *motion_to_matrix(&invert_motion(&m)).matrix(),
                direct,
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn axis_angle_round_trip() {
        for seed in 0..20 {
            let m = random_motion(seed);
            let r = motion_to_matrix(&m).rotation();
            let back = matrix_to_axis_angle(&r);
            assert_relative_eq!(
                Vector3::from(back),
                Vector3::from(m.rotation),
                epsilon = 1e-9
            );
        }
        let near_pi = [0.0, PI - 1e-9, 0.0];
        let back = matrix_to_axis_angle(&rodrigues(&Vector3::from(near_pi)));
        assert_relative_eq!(
            rodrigues(&Vector3::from(back)),
            rodrigues(&Vector3::from(near_pi)),
            epsilon = 1e-8
        );
    }

    #[test]
    fn rodrigues_jacobian_matches_finite_differences() {
        for w in [
            Vector3::new(0.3, -0.2, 0.9),
            Vector3::new(1e-7, 2e-7, -1e-7),
            Vector3::zeros(),
            Vector3::new(2.5, 0.4, -1.0),
        ] {
            let jac = rodrigues_jacobian(&w);
            for (i, d) in jac.iter().enumerate() {
                let mut e = Vector3::zeros();
                e[i] = 1e-6;
                let fd = (rodrigues(&(w + e)) - rodrigues(&(w - e))) / 2e-6;
                assert_relative_eq!(*d, fd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn lift_identity_intrinsics() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let mut values = vec![1.0; 4 * 5];
        values[3 * 4 + 2] = 5.0;
        let d = DepthMap::new(4, 5, values).unwrap();
        let cloud = lift(&d, &k);
        assert_eq!(cloud.points[3 * 4 + 2], Vector3::new(10.0, 15.0, 5.0));
        let proj = project(&cloud, &k);
        assert_eq!(proj.grid.at(2, 3), (2.0, 3.0));
        assert_eq!(proj.z[3 * 4 + 2], 5.0);
    }

    #[test]
    fn near_plane_points_are_flagged() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let cloud = PointCloud {
            width: 2,
            height: 1,
            points: vec![Vector3::new(1.0, 1.0, 1e-3), Vector3::new(1.0, 1.0, -2.0)],
        };
        let proj = project(&cloud, &k);
        assert!(proj.grid.at(0, 0).0.is_nan());
        assert!(proj.grid.at(1, 0).1.is_nan());
    }

    #[test]
    fn transform_identity_and_translation() {
        let k = CameraIntrinsics::new(50.0, 50.0, 3.0, 2.0).unwrap();
        let d = DepthMap::new(6, 4, (0..24).map(|i| 1.0 + i as f64).collect()).unwrap();
        let cloud = lift(&d, &k);
        assert_eq!(
            transform_points(&cloud, &TransformMatrix::identity()),
            cloud
        );
        let moved = transform_points(
            &cloud,
            &motion_to_matrix(&RigidMotion::translation([1.0, -1.0, 2.0])),
        );
        for (a, b) in cloud.points.iter().zip(&moved.points) {
            assert_eq!(*b, a + Vector3::new(1.0, -1.0, 2.0));
        }
    }

    #[test]
    fn depth_map_validation() {
        assert!(DepthMap::new(2, 1, vec![1.0, 0.0]).is_err());
        assert!(DepthMap::new(2, 2, vec![1.0; 3]).is_err());
        assert!(DepthMap::with_holes(2, 1, vec![1.0, 0.0]).is_ok());
        assert!(DepthMap::with_holes(2, 1, vec![1.0, -1.0]).is_err());
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn rotation_is_orthonormal(x in -3.0..3.0f64, y in -3.0..3.0f64, z in -3.0..3.0f64) {
            let r = axis_angle_to_matrix([x, y, z]).unwrap();
            let rrt = r * r.transpose();
            for i in 0..3 {
                for j in 0..3 {
                    let e = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((rrt[(i, j)] - e).abs() < 1e-12);
                }
            }
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn transform_preserves_distances(seed in 0u64..1000, a in 0usize..24, b in 0usize..24) {
            let k = CameraIntrinsics::new(40.0, 45.0, 3.0, 2.0).unwrap();
            let d = DepthMap::new(6, 4, (0..24).map(|i| 0.5 + (i * 7 % 11) as f64).collect()).unwrap();
            let cloud = lift(&d, &k);
            let moved = transform_points(&cloud, &motion_to_matrix(&random_motion(seed)));
            let before = (cloud.points[a] - cloud.points[b]).norm();
            let after = (moved.points[a] - moved.points[b]).norm();
            prop_assert!((before - after).abs() < 1e-9);
        }
    }
}
