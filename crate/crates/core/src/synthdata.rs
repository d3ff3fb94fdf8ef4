//! Procedural scenes of textured fronto-parallel planes with exact depth,
//! camera poses and instance labels.
//!
//! The world frame is the camera frame of an identity pose. Planes are
//! perpendicular to the world z axis; objects are finite rectangles that
//! may translate from frame to frame.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, CameraIntrinsics, DepthMap, RigidMotion};
use crate::losses;
use crate::rng::{self, Stream};
use crate::warp::{self, Image, InstanceMask};

/// Band-limited color texture: a base color plus a sum of oriented sinusoids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureSpec {
    pub seed: u64,
    pub base_color: [f64; 3],
    /// Peak amplitude of the sinusoid sum per channel.
    #[serde(default = "default_contrast")]
    pub contrast: f64,
    #[serde(default = "default_components")]
    pub components: usize,
    /// Frequency band in cycles per pixel, measured when the plane is seen
    /// at its own depth from an identity pose.
    #[serde(default = "default_band")]
    pub band: [f64; 2],
}

fn default_contrast() -> f64 {
    0.2
}

fn default_components() -> usize {
    6
}

fn default_band() -> [f64; 2] {
    [0.02, 0.08]
}

impl TextureSpec {
    pub fn new(seed: u64, base_color: [f64; 3]) -> Self {
        Self {
            seed,
            base_color,
            contrast: default_contrast(),
            components: default_components(),
            band: default_band(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Background {
    pub depth: f64,
    pub texture: TextureSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneObject {
    /// Depth of the plane at frame 0.
    pub depth: f64,
    /// `[u0, v0, u1, v1]`: pixel rectangle the object covers when seen
    /// from the identity pose at frame 0.
    pub extent: [f64; 4],
    /// World-frame translation per frame (meters).
    #[serde(default)]
    pub velocity: [f64; 3],
    pub texture: TextureSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub intrinsics: CameraIntrinsics,
    pub background: Background,
    #[serde(default)]
    pub objects: Vec<PlaneObject>,
    /// World-to-camera pose of every frame.
    pub trajectory: Vec<RigidMotion>,
}

/// Intrinsics in the proportions of a KITTI camera at the given size.
pub fn kitti_like_intrinsics(width: usize, height: usize) -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 0.58 * width as f64,
        fy: 1.92 * height as f64,
        cx: 0.5 * width as f64,
        cy: 0.5 * height as f64,
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::invalid(format!(
                "scene must be at least 2x2, got {}x{}",
                self.width, self.height
            )));
        }
        self.intrinsics.validate()?;
        if self.trajectory.is_empty() {
            return Err(Error::invalid("trajectory needs at least one pose"));
        }
        let bg = self.background.depth;
        if !(bg.is_finite() && bg > 0.0) {
            return Err(Error::invalid(format!(
                "background depth must be positive, got {bg}"
            )));
        }
        check_texture(&self.background.texture, "background")?;
        let frames = self.trajectory.len() as f64 - 1.0;
        for (i, o) in self.objects.iter().enumerate() {
            check_texture(&o.texture, &format!("objects[{i}]"))?;
            let last = o.depth + o.velocity[2] * frames;
            if !(o.depth > 0.0 && last > 0.0) {
                return Err(Error::invalid(format!(
                    "objects[{i}]: depth must stay positive"
                )));
            }
            if o.depth >= bg || last >= bg {
                return Err(Error::invalid(format!(
                    "objects[{i}]: plane at depth {} lies behind the background at {bg}",
                    o.depth.max(last)
                )));
            }
            let [u0, v0, u1, v1] = o.extent;
            if !(u0 < u1 && v0 < v1) || o.extent.iter().chain(&o.velocity).any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!(
                    "objects[{i}]: empty or non-finite extent"
                )));
            }
        }
        Ok(())
    }

    /// Motion taking points from the camera frame of `target` to that of `source`.
    pub fn relative_motion(&self, target: usize, source: usize) -> RigidMotion {
        relative_motion(&self.trajectory[target], &self.trajectory[source])
    }
}

/// `T_s ∘ T_t⁻¹` for world-to-camera poses.
pub fn relative_motion(target_pose: &RigidMotion, source_pose: &RigidMotion) -> RigidMotion {
    geometry::compose_motions(source_pose, &geometry::invert_motion(target_pose))
}

fn check_texture(t: &TextureSpec, what: &str) -> Result<()> {
    if t.components == 0 || !(t.contrast >= 0.0) || !(0.0 < t.band[0] && t.band[0] <= t.band[1]) {
        return Err(Error::invalid(format!(
            "{what}: invalid texture parameters"
        )));
    }
    if t.base_color.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::invalid(format!(
            "{what}: base color must lie in [0, 1]"
        )));
    }
    Ok(())
}

struct Wave {
    k: [f64; 2],
    phase: f64,
    amp: [f64; 3],
}

struct Texture {
    base: [f64; 3],
    waves: Vec<Wave>,
}

impl Texture {
    /// Frequencies are converted from cycles/pixel to cycles/meter on a
    /// plane at `depth` seen with focal length `focal`.
    fn build(spec: &TextureSpec, depth: f64, focal: f64) -> Self {
        let mut r = rng::stream(spec.seed, Stream::Synthesis, &[]);
        let norm = spec.contrast / spec.components as f64;
        let waves = (0..spec.components)
            .map(|_| {
                let cycles_per_px = r.random_range(spec.band[0]..=spec.band[1]);
                let per_meter = cycles_per_px * focal / depth;
                let theta = r.random_range(0.0..PI);
                let phase = r.random_range(0.0..2.0 * PI);
                let amp = [0, 1, 2].map(|_| norm * r.random_range(0.5..1.0));
                Wave {
                    k: [
                        2.0 * PI * per_meter * theta.cos(),
                        2.0 * PI * per_meter * theta.sin(),
                    ],
                    phase,
                    amp,
                }
            })
            .collect();
        Self {
            base: spec.base_color,
            waves,
        }
    }

    fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = self.base;
        for w in &self.waves {
            let s = (w.k[0] * x + w.k[1] * y + w.phase).sin();
            for (v, a) in c.iter_mut().zip(w.amp) {
                *v += a * s;
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }
}

/// One rendered view.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub image: Image,
    pub depth: DepthMap,
    pub instances: InstanceMask,
    /// World-to-camera pose.
    pub pose: RigidMotion,
}

struct Placed {
    depth: f64,
    // world-frame rectangle at this frame
    x: [f64; 2],
    y: [f64; 2],
    // texture origin, moves with the object
    origin: [f64; 2],
    texture: Texture,
}

/// Renders every pose of the trajectory.
pub fn render_sequence(spec: &SceneSpec) -> Result<Vec<RenderedFrame>> {
    spec.validate()?;
    (0..spec.trajectory.len())
        .into_par_iter()
        .map(|f| render_frame(spec, f))
        .collect()
}

/// Renders one frame; objects are placed according to their motion at `frame`.
pub fn render_frame(spec: &SceneSpec, frame: usize) -> Result<RenderedFrame> {
    render_at(spec, &spec.trajectory[frame], frame as f64)
}

/// Renders the scene from an arbitrary pose with objects at time `t` (in frames).
pub fn render_at(spec: &SceneSpec, pose: &RigidMotion, t: f64) -> Result<RenderedFrame> {
    spec.validate()?;
    let k = &spec.intrinsics;
    let bg_texture = Texture::build(&spec.background.texture, spec.background.depth, k.fx);
    let objects: Vec<Placed> = spec
        .objects
        .iter()
        .map(|o| {
            let [u0, v0, u1, v1] = o.extent;
            let to_x = |u: f64| (u - k.cx) / k.fx * o.depth;
            let to_y = |v: f64| (v - k.cy) / k.fy * o.depth;
            let off = o.velocity.map(|v| v * t);
            Placed {
                depth: o.depth + off[2],
                x: [to_x(u0) + off[0], to_x(u1) + off[0]],
                y: [to_y(v0) + off[1], to_y(v1) + off[1]],
                origin: [off[0], off[1]],
                texture: Texture::build(&o.texture, o.depth, k.fx),
            }
        })
        .collect();

    let m = geometry::motion_to_matrix(pose);
    let rt = m.rotation().transpose();
    let center = -(rt * m.translation());
    let (w, h) = (spec.width, spec.height);
    let n = w * h;
    let mut image = vec![0.0; 3 * n];
    let mut depth = vec![0.0; n];
    let mut labels = vec![0u16; n];
    for v in 0..h {
        for u in 0..w {
            let ray = k.ray(u as f64, v as f64);
            let dir = rt * Vector3::new(ray[0], ray[1], ray[2]);
            let i = v * w + u;
            // camera-frame depth equals the ray parameter since the ray has z = 1
            let mut best = None;
            if dir.z > 0.0 {
                let s = (spec.background.depth - center.z) / dir.z;
                if s > 0.0 {
                    let p = center + dir * s;
                    best = Some((s, 0u16, bg_texture.color(p.x, p.y)));
                }
            }
            for (j, o) in objects.iter().enumerate() {
                if dir.z <= 0.0 {
                    continue;
                }
                let s = (o.depth - center.z) / dir.z;
                if s <= 0.0 || best.as_ref().is_some_and(|(b, _, _)| s >= *b) {
                    continue;
                }
                let p = center + dir * s;
                if p.x >= o.x[0] && p.x < o.x[1] && p.y >= o.y[0] && p.y < o.y[1] {
                    let c = o.texture.color(p.x - o.origin[0], p.y - o.origin[1]);
                    best = Some((s, j as u16 + 1, c));
                }
            }
            let (s, label, c) = best.ok_or_else(|| {
                Error::invalid(format!(
                    "pixel ({u},{v}) sees no surface; the camera faces away from the scene"
                ))
            })?;
            depth[i] = s;
            labels[i] = label;
            for ch in 0..3 {
                image[ch * n + i] = c[ch];
            }
        }
    }
    Ok(RenderedFrame {
        image: Image::new(w, h, 3, image)?,
        depth: DepthMap::new(w, h, depth)?,
        instances: InstanceMask::new(w, h, labels)?,
        pose: *pose,
    })
}

/// Mean absolute photometric residual of ground-truth view synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarpResidual {
    /// Over valid target pixels of static background and static objects.
    pub static_residual: f64,
    /// Over valid target pixels labeled with a moving object; absent when
    /// no such pixel exists.
    pub dynamic_residual: Option<f64>,
}

/// Warps every frame's neighbors into it with ground-truth depth and
/// camera motion and measures the channel-averaged L1 residual.
pub fn gt_warp_residual(frames: &[RenderedFrame], spec: &SceneSpec) -> Result<WarpResidual> {
    if frames.len() < 2 {
        return Err(Error::invalid("residual needs at least two frames"));
    }
    let moving: Vec<bool> = spec
        .objects
        .iter()
        .map(|o| o.velocity != [0.0; 3])
        .collect();
    let (mut s_sum, mut s_n, mut d_sum, mut d_n) = (0.0, 0usize, 0.0, 0usize);
    for t in 0..frames.len() {
        for s in [t.wrapping_sub(1), t + 1] {
            if s >= frames.len() {
                continue;
            }
            let target = &frames[t];
            let m = relative_motion(&target.pose, &frames[s].pose);
            let view =
                warp::synthesize_view(&frames[s].image, &target.depth, &m, &spec.intrinsics)?;
            let l1 = losses::l1_map(&view.image, &target.image)?;
            for (i, r) in l1.values().iter().enumerate() {
                if !view.mask.is_valid(i) {
                    continue;
                }
                let label = target.instances.labels()[i];
                if label != 0 && moving[label as usize - 1] {
                    d_sum += r;
                    d_n += 1;
                } else {
                    s_sum += r;
                    s_n += 1;
                }
            }
        }
    }
    if s_n == 0 {
        return Err(Error::degenerate("no valid static pixels"));
    }
    Ok(WarpResidual {
        static_residual: s_sum / s_n as f64,
        dynamic_residual: (d_n > 0).then(|| d_sum / d_n as f64),
    })
}

/// The frame's instance mask restricted to objects with nonzero velocity.
pub fn moving_instances(frame: &RenderedFrame, spec: &SceneSpec) -> InstanceMask {
    let labels = frame
        .instances
        .labels()
        .iter()
        .map(|&l| {
            let moving = l != 0
                && spec
                    .objects
                    .get(l as usize - 1)
                    .is_some_and(|o| o.velocity != [0.0; 3]);
            if moving {
                l
            } else {
                0
            }
        })
        .collect();
    InstanceMask::new(frame.instances.width(), frame.instances.height(), labels).expect("same size")
}

/// Ready-made scenes.
pub mod presets {
    use super::*;

    /// A single textured plane at `depth` seen by a camera translating
    /// `step` meters along x per frame.
    pub fn plane(
        width: usize,
        height: usize,
        depth: f64,
        step: f64,
        frames: usize,
        seed: u64,
    ) -> SceneSpec {
        SceneSpec {
            width,
            height,
            intrinsics: kitti_like_intrinsics(width, height),
            background: Background {
                depth,
                texture: TextureSpec::new(seed, [0.5, 0.45, 0.4]),
            },
            objects: Vec::new(),
            trajectory: (0..frames)
                .map(|f| RigidMotion::translation([-step * f as f64, 0.0, 0.0]))
                .collect(),
        }
    }

    /// Background at 20 m with three static rectangles between 5 and 10 m,
    /// a camera moving sideways 0.3 m per frame with a slight forward drift
    /// and yaw, and optionally one object moving with the camera.
    pub fn desk_scene(
        width: usize,
        height: usize,
        frames: usize,
        moving_object: bool,
        seed: u64,
    ) -> SceneSpec {
        let (w, h) = (width as f64, height as f64);
        // broadband so that small misalignments show up in 3x3 SSIM windows
        let tex = |i: u64, c: [f64; 3]| TextureSpec {
            contrast: 0.3,
            band: [0.02, 0.2],
            ..TextureSpec::new(seed.wrapping_mul(31).wrapping_add(i), c)
        };
        let mut objects = vec![
            PlaneObject {
                depth: 6.0,
                extent: [0.08 * w, 0.2 * h, 0.3 * w, 0.85 * h],
                velocity: [0.0; 3],
                texture: tex(1, [0.75, 0.3, 0.25]),
            },
            PlaneObject {
                depth: 9.0,
                extent: [0.42 * w, 0.1 * h, 0.6 * w, 0.55 * h],
                velocity: [0.0; 3],
                texture: tex(2, [0.25, 0.65, 0.3]),
            },
            PlaneObject {
                depth: 7.5,
                extent: [0.72 * w, 0.35 * h, 0.92 * w, 0.9 * h],
                velocity: [0.0; 3],
                texture: tex(3, [0.3, 0.35, 0.8]),
            },
        ];
        if moving_object {
            objects.push(PlaneObject {
                depth: 8.0,
                extent: [0.5 * w, 0.6 * h, 0.68 * w, 0.95 * h],
                // moving along with the camera, the classic failure case of
                // the static scene assumption
                velocity: [0.3, 0.0, 0.0],
                texture: tex(4, [0.8, 0.75, 0.2]),
            });
        }
        SceneSpec {
            width,
            height,
            intrinsics: kitti_like_intrinsics(width, height),
            background: Background {
                depth: 20.0,
                texture: tex(0, [0.45, 0.45, 0.5]),
            },
            objects,
            trajectory: (0..frames).map(|f| desk_pose(f as f64)).collect(),
        }
    }

    /// Camera pose of [`desk_scene`] at (possibly fractional) time `t`.
    pub fn desk_pose(t: f64) -> RigidMotion {
        // camera center moves +x 0.3 m and +z 0.05 m per frame; yaw wiggles slightly
        let yaw = 0.01 * (0.9 * t).sin();
        let r = geometry::rodrigues(&Vector3::new(0.0, yaw, 0.0));
        let c = Vector3::new(0.3 * t, 0.0, 0.05 * t);
        let tr = -(r * c);
        RigidMotion::new([0.0, yaw, 0.0], [tr.x, tr.y, tr.z]).expect("finite pose")
    }
}

#[cfg(test)]
mod tests {
    use super::presets::*;
    use super::*;

    #[test]
    fn static_plane_shift_matches_parallax() {
        let spec = plane(64, 32, 10.0, 0.1, 2, 1);
        let frames = render_sequence(&spec).unwrap();
        let k = &spec.intrinsics;
        let m = spec.relative_motion(0, 1);
        let grid = warp::correspondence_grid(&frames[0].depth, &m, k, geometry::DEFAULT_Z_MIN).grid;
        let shift = k.fx * 0.1 / 10.0;
        for (i, u) in grid.u().iter().enumerate() {
            assert!((u - ((i % 64) as f64 - shift)).abs() < 1e-9);
        }
        assert!(frames[0]
            .depth
            .values()
            .iter()
            .all(|d| (d - 10.0).abs() < 1e-12));
        let r = gt_warp_residual(&frames, &spec).unwrap();
        assert!(r.static_residual < 0.01, "{r:?}");
        assert!(r.dynamic_residual.is_none());
    }

    #[test]
    fn still_camera_frames_are_identical() {
        let spec = plane(32, 16, 5.0, 0.0, 3, 2);
        let frames = render_sequence(&spec).unwrap();
        assert_eq!(frames[0].image, frames[1].image);
        assert_eq!(frames[1].image, frames[2].image);
        assert!(gt_warp_residual(&frames, &spec).unwrap().static_residual < 1e-6);
    }

    #[test]
    fn moving_object_mask_follows_projection() {
        let mut spec = plane(96, 48, 20.0, 0.0, 2, 3);
        spec.objects.push(PlaneObject {
            depth: 8.0,
            extent: [20.0, 10.0, 40.0, 30.0],
            velocity: [0.5, 0.0, 0.0],
            texture: TextureSpec::new(9, [0.8, 0.2, 0.2]),
        });
        let frames = render_sequence(&spec).unwrap();
        let shift = spec.intrinsics.fx * 0.5 / 8.0;
        let columns = |f: &RenderedFrame| {
            let l = f.instances.labels();
            let xs: Vec<usize> = (0..l.len())
                .filter(|i| l[*i] == 1)
                .map(|i| i % 96)
                .collect();
            (*xs.iter().min().unwrap(), *xs.iter().max().unwrap())
        };
        let (a0, a1) = columns(&frames[0]);
        let (b0, b1) = columns(&frames[1]);
        assert_eq!((a0, a1), (20, 39));
        assert_eq!(b0, (20.0 + shift).ceil() as usize);
        assert_eq!(b1, (40.0 + shift).ceil() as usize - 1);
        for (d, l) in frames[1]
            .depth
            .values()
            .iter()
            .zip(frames[1].instances.labels())
        {
            let expected = if *l == 1 { 8.0 } else { 20.0 };
            assert!((d - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn dynamic_residual_exceeds_static() {
        let spec = desk_scene(96, 32, 3, true, 4);
        let frames = render_sequence(&spec).unwrap();
        let r = gt_warp_residual(&frames, &spec).unwrap();
        assert!(r.dynamic_residual.unwrap() > r.static_residual, "{r:?}");
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = desk_scene(48, 16, 2, true, 5);
        assert_eq!(
            render_sequence(&spec).unwrap(),
            render_sequence(&spec).unwrap()
        );
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = desk_scene(48, 16, 2, false, 5);
        spec.objects[0].depth = 25.0;
        assert!(render_sequence(&spec).is_err());
        let mut spec = desk_scene(48, 16, 2, false, 5);
        spec.trajectory.clear();
        assert!(render_sequence(&spec).is_err());
    }
}
