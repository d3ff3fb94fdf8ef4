use std::any::Any;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};

use super::kernels::{self, ConvShape, Padding};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{self, CameraIntrinsics};
use crate::warp;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Exp(Var),
    Abs(Var),
    Min(Var, Var),
    Clamp(Var, f64, f64),
    Sigmoid(Var),
    Softplus(Var),
    Map(Var, fn(f64) -> f64),
    Sum(Var),
    Mean(Var),
    MaskedMean(Var, Arc<[f64]>, f64),
    Broadcast(Var),
    ExpandChannels(Var),
    ChannelMean(Var),
    Crop {
        a: Var,
        y0: usize,
        x0: usize,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        shape: ConvShape,
    },
    Upsample(Var, usize),
    MatMul(Var, Var),
    BoxFilter3(Var),
    BilinearSample {
        image: Var,
        grid: Var,
    },
    Lift(Var, CameraIntrinsics),
    RigidTransform {
        points: Var,
        motion: Var,
    },
    Project {
        points: Var,
        k: CameraIntrinsics,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Values computed outside the differentiable graph during one evaluation.
///
/// A tape built with [`Tape::replaying`] returns these in order from
/// [`Tape::frozen`] instead of recomputing them, so perturbed re-evaluations
/// see exactly the stop-gradient constants of the original pass.
#[derive(Clone, Default)]
pub struct FrozenValues(Vec<Arc<dyn Any + Send + Sync>>);

impl FrozenValues {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

enum FrozenMode {
    Record(Vec<Arc<dyn Any + Send + Sync>>),
    Replay(Vec<Arc<dyn Any + Send + Sync>>, usize),
}

const FNV_PRIME: u64 = 0x100_0000_01b3;
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

/// Append-only record of tensor operations for reverse-mode differentiation.
///
/// Parents always precede their children, so the recording order is a
/// topological order and backward simply walks it in reverse.
pub struct Tape {
    nodes: Vec<Node>,
    frozen: FrozenMode,
    track_branches: bool,
    branch_hash: u64,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to the tape's trainable leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient data, or zeros of the given length when the leaf was unreachable.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; len])
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            frozen: FrozenMode::Record(Vec::new()),
            track_branches: false,
            branch_hash: FNV_OFFSET,
            backward_done: false,
        }
    }

    /// A tape whose [`Tape::frozen`] calls return previously recorded values.
    pub fn replaying(values: FrozenValues) -> Self {
        Self {
            frozen: FrozenMode::Replay(values.0, 0),
            ..Self::new()
        }
    }

    /// Records a hash of every piecewise branch taken (sign of `abs`, winner
    /// of `min`, bilinear cell, …). Two evaluations with equal hashes lie on
    /// the same smooth piece of the function.
    pub fn track_branches(&mut self, on: bool) {
        self.track_branches = on;
    }

    pub fn branch_hash(&self) -> u64 {
        self.branch_hash
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Computes (or, when replaying, recalls) a value treated as a constant
    /// by differentiation.
    pub fn frozen<T: Clone + Send + Sync + 'static>(
        &mut self,
        compute: impl FnOnce(&Tape) -> T,
    ) -> T {
        if let FrozenMode::Replay(values, next) = &mut self.frozen {
            let stored = values
                .get(*next)
                .expect("replayed evaluation requested more frozen values than were recorded");
            *next += 1;
            return stored
                .downcast_ref::<T>()
                .expect("replayed frozen value has a different type")
                .clone();
        }
        let value = compute(self);
        if let FrozenMode::Record(values) = &mut self.frozen {
            values.push(Arc::new(value.clone()));
        }
        value
    }

    pub fn frozen_values(&self) -> FrozenValues {
        match &self.frozen {
            FrozenMode::Record(v) | FrozenMode::Replay(v, _) => FrozenValues(v.clone()),
        }
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    fn note_branches(&mut self, codes: impl Iterator<Item = u64>) {
        if !self.track_branches {
            return;
        }
        let mut h = self.branch_hash;
        for c in codes {
            h = (h ^ c).wrapping_mul(FNV_PRIME);
        }
        self.branch_hash = h;
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, what)?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(t, op, &[a, b]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let t = Tensor::from_parts(
            va.shape().to_vec(),
            va.data().iter().map(|x| f(*x)).collect(),
        );
        self.push(t, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; ties select the first argument.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(
            a,
            b,
            "min",
            |x, y| if x <= y { x } else { y },
            Op::Min(a, b),
        )?;
        if self.track_branches {
            let codes: Vec<u64> = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| match x.partial_cmp(y) {
                    Some(std::cmp::Ordering::Less) => 0,
                    Some(std::cmp::Ordering::Equal) => 1,
                    _ => 2,
                })
                .collect();
            self.note_branches(codes.into_iter());
        }
        Ok(out)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::MulScalar(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// `|x|`, with subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        if self.track_branches {
            let codes: Vec<u64> = self
                .value(a)
                .data()
                .iter()
                .map(|&x| {
                    if x > 0.0 {
                        1
                    } else if x < 0.0 {
                        2
                    } else {
                        0
                    }
                })
                .collect();
            self.note_branches(codes.into_iter());
        }
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Clamp into `[lo, hi]`; the gradient passes on the closed interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        if self.track_branches {
            let codes: Vec<u64> = self
                .value(a)
                .data()
                .iter()
                .map(|&x| {
                    if x < lo {
                        0
                    } else if x == lo {
                        1
                    } else if x < hi {
                        2
                    } else if x == hi {
                        3
                    } else {
                        4
                    }
                })
                .collect();
            self.note_branches(codes.into_iter());
        }
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln(1 + eˣ)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Elementwise `f` with a caller-supplied derivative `df`.
    pub fn map(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        self.unary(a, f, Op::Map(a, df))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// `Σ a·m / Σ m` for a constant 0/1 mask `m`.
    pub fn masked_mean(&mut self, a: Var, mask: &[f64]) -> Result<Var> {
        let v = self.value(a);
        if v.numel() != mask.len() {
            return Err(Error::shape(format!(
                "masked_mean: {} values vs mask of {}",
                v.numel(),
                mask.len()
            )));
        }
        let count: f64 = mask.iter().sum();
        if count <= 0.0 {
            return Err(Error::degenerate("masked_mean over an empty mask"));
        }
        // masked-out entries are skipped outright so non-finite filler cannot leak in
        let s: f64 = v
            .data()
            .iter()
            .zip(mask)
            .map(|(x, m)| if *m == 0.0 { 0.0 } else { x * m })
            .sum();
        Ok(self.push(
            Tensor::scalar(s / count),
            Op::MaskedMean(a, Arc::from(mask), count),
            &[a],
        ))
    }

    /// `Σ a·m` for a constant 0/1 mask `m`.
    pub fn masked_sum(&mut self, a: Var, mask: &[f64]) -> Result<Var> {
        let v = self.value(a);
        if v.numel() != mask.len() {
            return Err(Error::shape(format!(
                "masked_sum: {} values vs mask of {}",
                v.numel(),
                mask.len()
            )));
        }
        let s: f64 = v
            .data()
            .iter()
            .zip(mask)
            .map(|(x, m)| if *m == 0.0 { 0.0 } else { x * m })
            .sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::MaskedMean(a, Arc::from(mask), 1.0),
            &[a],
        ))
    }

    /// Repeats a one-element tensor to `shape`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if v.numel() != 1 {
            return Err(Error::shape(format!(
                "broadcast needs a scalar, got {:?}",
                v.shape()
            )));
        }
        let t = Tensor::full(shape, v.item());
        Ok(self.push(t, Op::Broadcast(a), &[a]))
    }

    /// `[1, H, W]` → `[c, H, W]`.
    pub fn expand_channels(&mut self, a: Var, c: usize) -> Result<Var> {
        let (c0, h, w) = self.value(a).chw()?;
        if c0 != 1 {
            return Err(Error::shape(format!(
                "expand_channels needs one channel, got {c0}"
            )));
        }
        let plane = self.value(a).data();
        let data = (0..c).flat_map(|_| plane.iter().copied()).collect();
        Ok(self.push(
            Tensor::from_parts(vec![c, h, w], data),
            Op::ExpandChannels(a),
            &[a],
        ))
    }

    /// `[C, H, W]` → `[1, H, W]` mean over channels.
    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).chw()?;
        let v = self.value(a).data();
        let n = h * w;
        let mut out = vec![0.0; n];
        for ch in 0..c {
            for (o, x) in out.iter_mut().zip(&v[ch * n..(ch + 1) * n]) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= c as f64;
        }
        Ok(self.push(
            Tensor::from_parts(vec![1, h, w], out),
            Op::ChannelMean(a),
            &[a],
        ))
    }

    /// Spatial window `[y0, y0+h) × [x0, x0+w)` of every channel.
    pub fn crop(&mut self, a: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let (c, ih, iw) = self.value(a).chw()?;
        if y0 + h > ih || x0 + w > iw {
            return Err(Error::shape(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {ih}x{iw}"
            )));
        }
        let v = self.value(a).data();
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                let row = &v[(ch * ih + y0 + y) * iw + x0..];
                out.extend_from_slice(&row[..w]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![c, h, w], out),
            Op::Crop { a, y0, x0 },
            &[a],
        ))
    }

    /// 2D convolution of `[Cin, H, W]` with `[Cout, Cin, k, k]` weights
    /// (odd `k`, "same" padding of `k/2`).
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (cin, h, w) = self.value(input).chw()?;
        let ws = self.value(weight).shape().to_vec();
        let [cout, wcin, k, k2] = ws[..] else {
            return Err(Error::shape(format!("conv weight must be 4-D, got {ws:?}")));
        };
        if wcin != cin || k != k2 || k % 2 == 0 || stride == 0 {
            return Err(Error::shape(format!(
                "conv weight {ws:?} incompatible with input channels {cin} / stride {stride}"
            )));
        }
        if padding == Padding::Reflect && (h <= k / 2 || w <= k / 2) {
            return Err(Error::shape(format!(
                "reflection padding needs input larger than {h}x{w}"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape(format!(
                    "conv bias {:?} vs {cout} output channels",
                    self.value(b).shape()
                )));
            }
        }
        let shape = ConvShape {
            cin,
            cout,
            h,
            w,
            k,
            stride,
            padding,
        };
        let out = kernels::conv2d_forward(
            &shape,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let (ho, wo) = shape.out_hw();
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(
            Tensor::from_parts(vec![cout, ho, wo], out),
            Op::Conv2d {
                input,
                weight,
                bias,
                shape,
            },
            &parents,
        ))
    }

    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let (c, h, w) = self.value(a).chw()?;
        if factor == 0 {
            return Err(Error::invalid("upsample factor must be positive"));
        }
        let out = kernels::upsample_nearest(self.value(a).data(), c, h, w, factor);
        Ok(self.push(
            Tensor::from_parts(vec![c, h * factor, w * factor], out),
            Op::Upsample(a, factor),
            &[a],
        ))
    }

    /// `[m, k] × [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (&[m, k], &[k2, n]) = (sa, sb) else {
            return Err(Error::shape(format!(
                "matmul needs 2-D operands, got {sa:?} and {sb:?}"
            )));
        };
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = da[i * k + p];
                for j in 0..n {
                    out[i * n + j] += x * db[p * n + j];
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(a, b),
            &[a, b],
        ))
    }

    /// 3×3 mean filter with reflection padding.
    pub fn box_filter3(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).chw()?;
        if h < 2 || w < 2 {
            return Err(Error::shape(format!(
                "box filter needs at least 2x2, got {h}x{w}"
            )));
        }
        let out = kernels::box3_reflect(self.value(a).data(), c, h, w);
        Ok(self.push(
            Tensor::from_parts(vec![c, h, w], out),
            Op::BoxFilter3(a),
            &[a],
        ))
    }

    /// Bilinear gather of `image` `[C, Hs, Ws]` at `grid` `[2, H, W]` (u plane
    /// then v plane). Invalid coordinates read zero. Differentiable with
    /// respect to both arguments.
    pub fn bilinear_sample(&mut self, image: Var, grid: Var) -> Result<Var> {
        let (c, hs, ws) = self.value(image).chw()?;
        let (g2, h, w) = self.value(grid).chw()?;
        if g2 != 2 {
            return Err(Error::shape(format!(
                "sampling grid needs 2 planes, got {g2}"
            )));
        }
        let n = h * w;
        let gd = self.value(grid).data();
        let (gu, gv) = gd.split_at(n);
        let out = warp::sample_planes(self.value(image).data(), ws, hs, c, gu, gv);
        if self.track_branches {
            let codes: Vec<u64> = gu
                .iter()
                .zip(gv)
                .map(|(&u, &v)| match warp::cell(u, v, ws, hs) {
                    Some(cell) => ((cell.y0 as u64) << 32) | cell.x0 as u64,
                    None => u64::MAX,
                })
                .collect();
            self.note_branches(codes.into_iter());
        }
        Ok(self.push(
            Tensor::from_parts(vec![c, h, w], out),
            Op::BilinearSample { image, grid },
            &[image, grid],
        ))
    }

    /// Back-projects a `[1, H, W]` depth map to `[3, H, W]` camera-frame points.
    pub fn lift(&mut self, depth: Var, k: &CameraIntrinsics) -> Result<Var> {
        let (c, h, w) = self.value(depth).chw()?;
        if c != 1 {
            return Err(Error::shape(format!(
                "lift needs a single-channel depth, got {c}"
            )));
        }
        let d = self.value(depth).data();
        let n = h * w;
        let mut out = vec![0.0; 3 * n];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let ray = k.ray(x as f64, y as f64);
                out[i] = d[i] * ray[0];
                out[n + i] = d[i] * ray[1];
                out[2 * n + i] = d[i];
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![3, h, w], out),
            Op::Lift(depth, *k),
            &[depth],
        ))
    }

    /// Applies the rigid motion `[rx, ry, rz, tx, ty, tz]` to `[3, H, W]` points.
    pub fn rigid_transform(&mut self, points: Var, motion: Var) -> Result<Var> {
        let (c, h, w) = self.value(points).chw()?;
        if c != 3 || self.value(motion).numel() != 6 {
            return Err(Error::shape(format!(
                "rigid_transform needs [3,H,W] points and 6 motion values, got {c} and {}",
                self.value(motion).numel()
            )));
        }
        let m = self.value(motion).data();
        let r = geometry::rodrigues(&Vector3::new(m[0], m[1], m[2]));
        let t = [m[3], m[4], m[5]];
        let p = self.value(points).data();
        let n = h * w;
        let mut out = vec![0.0; 3 * n];
        for i in 0..n {
            let (x, y, z) = (p[i], p[n + i], p[2 * n + i]);
            for row in 0..3 {
                out[row * n + i] = r[(row, 0)] * x + r[(row, 1)] * y + r[(row, 2)] * z + t[row];
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![3, h, w], out),
            Op::RigidTransform { points, motion },
            &[points, motion],
        ))
    }

    /// Projects `[3, H, W]` points to a `[2, H, W]` pixel grid; points with
    /// `z <= z_min` produce NaN (flagged) coordinates and no gradient.
    pub fn project(&mut self, points: Var, k: &CameraIntrinsics, z_min: f64) -> Result<Var> {
        let (c, h, w) = self.value(points).chw()?;
        if c != 3 {
            return Err(Error::shape(format!(
                "project needs [3,H,W] points, got {c} planes"
            )));
        }
        let p = self.value(points).data();
        let n = h * w;
        let mut out = vec![0.0; 2 * n];
        for i in 0..n {
            let (u, v) = geometry::project_point(&[p[i], p[n + i], p[2 * n + i]], k, z_min);
            out[i] = u;
            out[n + i] = v;
        }
        if self.track_branches {
            let codes: Vec<u64> = out[..n].iter().map(|u| u.is_nan() as u64).collect();
            self.note_branches(codes.into_iter());
        }
        Ok(self.push(
            Tensor::from_parts(vec![2, h, w], out),
            Op::Project { points, k: *k },
            &[points],
        ))
    }

    /// Reverse-mode sweep from a one-element root.
    ///
    /// A tape can be differentiated once; call [`Tape::reset_backward`] to
    /// allow another sweep.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_done = true;
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut result: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        pending[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                result[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.propagate(i, &g, &mut pending);
        }
        Ok(Gradients { grads: result })
    }

    pub fn reset_backward(&mut self) {
        self.backward_done = false;
    }

    fn propagate(&self, i: usize, g: &[f64], pending: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, contribution: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut pending[v.0] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contribution) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contribution),
            }
        };
        let zip_map = |a: &[f64], f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            g.iter().zip(a).map(|(gv, x)| f(*gv, *x)).collect()
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    send(*a, zip_map(val(*b), &|gv, y| gv * y));
                }
                if rg(*b) {
                    send(*b, zip_map(val(*a), &|gv, x| gv * x));
                }
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                if rg(*a) {
                    send(*a, zip_map(vb, &|gv, y| gv / y));
                }
                if rg(*b) {
                    let c: Vec<f64> = g
                        .iter()
                        .zip(out)
                        .zip(vb)
                        .map(|((gv, q), y)| -gv * q / y)
                        .collect();
                    send(*b, c);
                }
            }
            Op::AddScalar(a) => send(*a, g.to_vec()),
            Op::MulScalar(a, c) => send(*a, g.iter().map(|x| x * c).collect()),
            Op::Exp(a) => send(*a, g.iter().zip(out).map(|(gv, e)| gv * e).collect()),
            Op::Abs(a) => send(
                *a,
                zip_map(val(*a), &|gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Min(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let first: Vec<bool> = va.iter().zip(vb).map(|(x, y)| x <= y).collect();
                if rg(*a) {
                    send(
                        *a,
                        g.iter()
                            .zip(&first)
                            .map(|(gv, f)| if *f { *gv } else { 0.0 })
                            .collect(),
                    );
                }
                if rg(*b) {
                    send(
                        *b,
                        g.iter()
                            .zip(&first)
                            .map(|(gv, f)| if *f { 0.0 } else { *gv })
                            .collect(),
                    );
                }
            }
            Op::Clamp(a, lo, hi) => send(
                *a,
                zip_map(val(*a), &|gv, x| {
                    if x >= *lo && x <= *hi {
                        gv
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Sigmoid(a) => send(
                *a,
                g.iter()
                    .zip(out)
                    .map(|(gv, s)| gv * s * (1.0 - s))
                    .collect(),
            ),
            Op::Softplus(a) => send(*a, zip_map(val(*a), &|gv, x| gv * sigmoid(x))),
            Op::Map(a, df) => send(*a, zip_map(val(*a), &|gv, x| gv * df(x))),
            Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::MaskedMean(a, mask, count) => {
                send(*a, mask.iter().map(|m| g[0] * m / count).collect());
            }
            Op::Broadcast(a) => send(*a, vec![g.iter().sum()]),
            Op::ExpandChannels(a) => {
                let n = val(*a).len();
                let mut acc = vec![0.0; n];
                for chunk in g.chunks(n) {
                    for (s, x) in acc.iter_mut().zip(chunk) {
                        *s += x;
                    }
                }
                send(*a, acc);
            }
            Op::ChannelMean(a) => {
                let n = g.len();
                let c = val(*a).len() / n;
                let mut acc = Vec::with_capacity(c * n);
                for _ in 0..c {
                    acc.extend(g.iter().map(|x| x / c as f64));
                }
                send(*a, acc);
            }
            Op::Crop { a, y0, x0 } => {
                let s = self.nodes[a.0].value.shape();
                let (ih, iw) = (s[1], s[2]);
                let os = node.value.shape();
                let (c, h, w) = (os[0], os[1], os[2]);
                let mut acc = vec![0.0; c * ih * iw];
                for ch in 0..c {
                    for y in 0..h {
                        let dst = &mut acc[(ch * ih + y0 + y) * iw + x0..];
                        dst[..w].copy_from_slice(&g[(ch * h + y) * w..(ch * h + y + 1) * w]);
                    }
                }
                send(*a, acc);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                shape,
            } => {
                let (gi, gw, gb) = kernels::conv2d_backward(
                    shape,
                    val(*input),
                    val(*weight),
                    g,
                    rg(*input),
                    rg(*weight),
                );
                if let Some(gi) = gi {
                    send(*input, gi);
                }
                if let Some(gw) = gw {
                    send(*weight, gw);
                }
                if let Some(b) = bias {
                    send(*b, gb);
                }
            }
            Op::Upsample(a, f) => {
                let s = self.nodes[a.0].value.shape();
                send(
                    *a,
                    kernels::upsample_nearest_backward(g, s[0], s[1], s[2], *f),
                );
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (val(*a), val(*b));
                if rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] = (0..n).map(|j| g[i * n + j] * db[p * n + j]).sum();
                        }
                    }
                    send(*a, ga);
                }
                if rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let x = da[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] += x * g[i * n + j];
                            }
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::BoxFilter3(a) => {
                let s = self.nodes[a.0].value.shape();
                send(*a, kernels::box3_reflect_backward(g, s[0], s[1], s[2]));
            }
            Op::BilinearSample { image, grid } => {
                let is = self.nodes[image.0].value.shape();
                let (c, hs, ws) = (is[0], is[1], is[2]);
                let gd = val(*grid);
                let n = gd.len() / 2;
                let (gu, gv) = gd.split_at(n);
                let img = val(*image);
                let ns = hs * ws;
                if rg(*image) {
                    let mut gi = vec![0.0; c * ns];
                    for i in 0..n {
                        if let Some(cell) = warp::cell(gu[i], gv[i], ws, hs) {
                            for (x, y, wgt) in cell.weights() {
                                for ch in 0..c {
                                    gi[ch * ns + y * ws + x] += wgt * g[ch * n + i];
                                }
                            }
                        }
                    }
                    send(*image, gi);
                }
                if rg(*grid) {
                    let mut gg = vec![0.0; 2 * n];
                    for i in 0..n {
                        if let Some(cell) = warp::cell(gu[i], gv[i], ws, hs) {
                            for ch in 0..c {
                                let (du, dv) = cell.gradient(&img[ch * ns..(ch + 1) * ns], ws);
                                gg[i] += g[ch * n + i] * du;
                                gg[n + i] += g[ch * n + i] * dv;
                            }
                        }
                    }
                    send(*grid, gg);
                }
            }
            Op::Lift(depth, k) => {
                let s = self.nodes[depth.0].value.shape();
                let (h, w) = (s[1], s[2]);
                let n = h * w;
                let mut gd = vec![0.0; n];
                for y in 0..h {
                    for x in 0..w {
                        let i = y * w + x;
                        let ray = k.ray(x as f64, y as f64);
                        gd[i] = g[i] * ray[0] + g[n + i] * ray[1] + g[2 * n + i];
                    }
                }
                send(*depth, gd);
            }
            Op::RigidTransform { points, motion } => {
                let m = val(*motion);
                let w = Vector3::new(m[0], m[1], m[2]);
                let r = geometry::rodrigues(&w);
                let p = val(*points);
                let n = p.len() / 3;
                if rg(*points) {
                    let mut gp = vec![0.0; 3 * n];
                    for i in 0..n {
                        let go = [g[i], g[n + i], g[2 * n + i]];
                        for col in 0..3 {
                            gp[col * n + i] =
                                r[(0, col)] * go[0] + r[(1, col)] * go[1] + r[(2, col)] * go[2];
                        }
                    }
                    send(*points, gp);
                }
                if rg(*motion) {
                    // G = Σ g pᵀ, then ∂L/∂ω_k = ⟨∂R/∂ω_k, G⟩ and ∂L/∂t = Σ g
                    let mut outer = Matrix3::<f64>::zeros();
                    let mut gt = [0.0; 3];
                    for i in 0..n {
                        let go = [g[i], g[n + i], g[2 * n + i]];
                        let pi = [p[i], p[n + i], p[2 * n + i]];
                        for a in 0..3 {
                            gt[a] += go[a];
                            for b in 0..3 {
                                outer[(a, b)] += go[a] * pi[b];
                            }
                        }
                    }
                    let jac = geometry::rodrigues_jacobian(&w);
                    let gr: Vec<f64> = jac.iter().map(|d| d.component_mul(&outer).sum()).collect();
                    send(*motion, vec![gr[0], gr[1], gr[2], gt[0], gt[1], gt[2]]);
                }
            }
            Op::Project { points, k } => {
                let p = val(*points);
                let n = p.len() / 3;
                let mut gp = vec![0.0; 3 * n];
                for i in 0..n {
                    if out[i].is_nan() {
                        continue;
                    }
                    let (x, y, z) = (p[i], p[n + i], p[2 * n + i]);
                    let (gu, gv) = (g[i], g[n + i]);
                    gp[i] = gu * k.fx / z;
                    gp[n + i] = gv * k.fy / z;
                    gp[2 * n + i] = -(gu * k.fx * x + gv * k.fy * y) / (z * z);
                }
                send(*points, gp);
            }
        }
    }
}
