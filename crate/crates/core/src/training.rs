//! The optimization loop: view synthesis against free pose variables,
//! self-sample generation and re-inference, loss assembly and Adam updates.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::evaluation::{self, DepthMetrics, EvalSettings, RegionMetrics};
use crate::geometry::{CameraIntrinsics, DepthMap, DEFAULT_Z_MIN};
use crate::losses::{self, diff, IsslOptions, LossParts, LossWeights};
use crate::model::{NetConfig, PoseVariables, TinyDepthNet};
use crate::rng::{self, Stream};
use crate::selfsample::{self, SamplerConfig, SelfSample};
use crate::warp::{self, Image, InstanceMask, ValidityMask};

/// Photometric loss assigned to pixels a source does not cover, so the
/// per-pixel minimum never selects them while another source is valid.
const UNCOVERED_LOSS: f64 = 1e3;

/// Scale of the noise added to the unwarped error before the automask
/// comparison. At zero motion the warped and unwarped errors tie, and the
/// noise keeps about half of those pixels instead of none.
pub const TIE_BREAK_SCALE: f64 = 1e-5;

/// Deterministic tie-break offsets for `n` pixels.
pub fn tie_break_offsets(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, Stream::TieBreak, &[]);
    (0..n)
        .map(|_| TIE_BREAK_SCALE * r.sample::<f64, _>(StandardNormal))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// First epoch trained at the decayed rate.
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    /// Learning rate of the pose variables relative to `lr`.
    pub pose_lr_scale: f64,
    pub seed: u64,
    /// Number of source frames per target.
    pub n_s: usize,
    pub automask: bool,
    pub weights: LossWeights,
    /// `total_epochs` is taken from `epochs`.
    pub sampler: SamplerConfig,
    pub issl: IsslOptions,
    pub net: NetConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            steps_per_epoch: 200,
            batch_size: 2,
            lr: 1e-4,
            lr_decay_epoch: 15,
            lr_decay_factor: 10.0,
            pose_lr_scale: 1.0,
            seed: 0,
            n_s: 2,
            automask: true,
            weights: LossWeights::default(),
            sampler: SamplerConfig::default(),
            issl: IsslOptions::default(),
            net: NetConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_epoch == 0 || self.batch_size == 0 || self.n_s == 0 {
            return Err(Error::invalid(
                "steps_per_epoch, batch_size and n_s must be positive",
            ));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("lr_decay_factor", self.lr_decay_factor),
            ("pose_lr_scale", self.pose_lr_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::invalid(
                "adam: betas must lie in [0, 1) and eps be positive",
            ));
        }
        self.weights.validate()?;
        self.net.validate()?;
        self.sampler().validate()
    }

    /// The sampler with its schedule stretched over `epochs`.
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            total_epochs: self.epochs.max(1),
            ..self.sampler
        }
    }

    /// Step size at `epoch`; the decay applies from `lr_decay_epoch` onward.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.lr / self.lr_decay_factor
        } else {
            self.lr
        }
    }
}

/// A target frame and the frames warped into it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingTuple {
    pub target: usize,
    pub sources: Vec<usize>,
}

/// Frames of one monocular sequence plus the training windows over them.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<Image>,
    pub tuples: Vec<TrainingTuple>,
}

/// Source offsets for `n_s` sources: −1, +1, −2, +2, …
pub fn source_offsets(n_s: usize) -> Vec<isize> {
    (0..n_s)
        .map(|i| {
            let step = (i / 2 + 1) as isize;
            if i % 2 == 0 {
                -step
            } else {
                step
            }
        })
        .collect()
}

/// Every frame that has all its sources inside the sequence becomes a target.
pub fn sliding_windows(frame_count: usize, n_s: usize) -> Vec<TrainingTuple> {
    let offsets = source_offsets(n_s);
    (0..frame_count)
        .filter_map(|t| {
            let sources: Option<Vec<usize>> = offsets
                .iter()
                .map(|o| {
                    let s = t as isize + o;
                    (s >= 0 && (s as usize) < frame_count).then_some(s as usize)
                })
                .collect();
            sources.map(|sources| TrainingTuple { target: t, sources })
        })
        .collect()
}

impl TrainingData {
    pub fn new(intrinsics: CameraIntrinsics, frames: Vec<Image>, n_s: usize) -> Result<Self> {
        intrinsics.validate()?;
        let first = frames.first().ok_or_else(|| Error::invalid("no frames"))?;
        if let Some(f) = frames
            .iter()
            .find(|f| !f.same_shape(first) || f.channels() != 3)
        {
            return Err(Error::shape(format!(
                "all frames must be RGB {}x{}, found {}x{}x{}",
                first.width(),
                first.height(),
                f.channels(),
                f.height(),
                f.width()
            )));
        }
        let tuples = sliding_windows(frames.len(), n_s);
        if tuples.is_empty() {
            return Err(Error::invalid(format!(
                "{} frames give no training window with {n_s} sources",
                frames.len()
            )));
        }
        Ok(Self {
            intrinsics,
            frames,
            tuples,
        })
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.tuples
            .iter()
            .flat_map(|t| t.sources.iter().map(move |s| (t.target, *s)))
            .collect()
    }
}

/// A held-out frame with ground truth for per-epoch evaluation.
#[derive(Debug, Clone)]
pub struct EvalFrame {
    pub image: Image,
    pub depth: DepthMap,
    pub instances: Option<InstanceMask>,
}

/// Everything [`item_objective`] needs besides the parameters.
pub struct ObjectiveSettings<'a> {
    pub weights: &'a LossWeights,
    pub issl: &'a IsslOptions,
    pub sampler: &'a SamplerConfig,
    pub automask: bool,
    pub epoch: usize,
    /// Seed of this item's self-sample motions and automask tie-break.
    pub sample_seed: u64,
}

/// Tape handles of one item's loss terms.
#[derive(Debug, Clone, Copy)]
pub struct ItemLosses {
    pub photometric: Var,
    pub smoothness: Var,
    /// `None` when the term is disabled or no self-sample had a valid pixel.
    pub issl: Option<Var>,
    pub total: Var,
}

/// Builds the full objective of one target on the tape.
///
/// `poses[j]` is the 6-vector motion from the target to `sources[j]`. The
/// automask and the self-samples are frozen values: gradients reach the
/// network through the prediction on the target and the re-inference on
/// every self-sample, and reach the poses through the warps.
#[allow(clippy::too_many_arguments)]
pub fn item_objective(
    tape: &mut Tape,
    net: &TinyDepthNet,
    params: &[Var],
    poses: &[Var],
    target: &Image,
    sources: &[&Image],
    k: &CameraIntrinsics,
    s: &ObjectiveSettings,
) -> Result<ItemLosses> {
    if poses.len() != sources.len() || sources.is_empty() {
        return Err(Error::invalid(format!(
            "need one pose per source, got {} poses for {} sources",
            poses.len(),
            sources.len()
        )));
    }
    let (w, h) = (target.width(), target.height());
    let n = w * h;
    let target_v = tape.constant(Tensor::from_image(target));
    let depth = net.forward(tape, params, target_v)?;

    let mut maps = Vec::with_capacity(sources.len());
    for (src, pose) in sources.iter().zip(poses) {
        let points = tape.lift(depth, k)?;
        let moved = tape.rigid_transform(points, *pose)?;
        let grid = tape.project(moved, k, DEFAULT_Z_MIN)?;
        let src_v = tape.constant(Tensor::from_image(src));
        let warped = tape.bilinear_sample(src_v, grid)?;
        let map = diff::photometric_map(tape, warped, target_v, s.weights.alpha)?;

        let g = tape.value(grid).data();
        let covered: Vec<f64> = (0..n)
            .map(|i| warp::in_bounds(g[i], g[n + i], w, h) as u8 as f64)
            .collect();
        let filler: Vec<f64> = covered.iter().map(|c| (1.0 - c) * UNCOVERED_LOSS).collect();
        let covered = tape.constant(Tensor::new(vec![1, h, w], covered)?);
        let filler = tape.constant(Tensor::new(vec![1, h, w], filler)?);
        let map = tape.mul(map, covered)?;
        maps.push(tape.add(map, filler)?);
    }
    let best = diff::min_reprojection(tape, &maps)?;

    let alpha = s.weights.alpha;
    let automask = s.automask;
    let seed = s.sample_seed;
    let keep: std::result::Result<Vec<f64>, String> = tape.frozen(|t| {
        let warped_min = t.value(best).data();
        if !automask {
            return Ok(warped_min
                .iter()
                .map(|v| (*v < UNCOVERED_LOSS) as u8 as f64)
                .collect());
        }
        let raw: Vec<losses::PixelLossMap> = sources
            .iter()
            .map(|src| losses::photometric_map(src, target, alpha))
            .collect::<Result<_>>()
            .map_err(|e| e.to_string())?;
        let raw_min = losses::min_reprojection(&raw).map_err(|e| e.to_string())?;
        let noise = tie_break_offsets(seed, warped_min.len());
        Ok(warped_min
            .iter()
            .zip(raw_min.values())
            .zip(noise)
            .map(|((wv, r), e)| (*wv < *r + e && *wv < UNCOVERED_LOSS) as u8 as f64)
            .collect())
    });
    let keep = keep.map_err(Error::InvalidArgument)?;
    let photometric = tape.masked_mean(best, &keep)?;
    let smoothness = diff::smoothness_loss(tape, depth, target)?;

    let issl = if s.weights.lambda3 > 0.0 {
        issl_term(tape, net, params, depth, target, k, s)?
    } else {
        None
    };
    let total = diff::total_loss(tape, s.weights, photometric, smoothness, issl)?;
    Ok(ItemLosses {
        photometric,
        smoothness,
        issl,
        total,
    })
}

fn issl_term(
    tape: &mut Tape,
    net: &TinyDepthNet,
    params: &[Var],
    depth: Var,
    target: &Image,
    k: &CameraIntrinsics,
    s: &ObjectiveSettings,
) -> Result<Option<Var>> {
    let (sampler, epoch, seed) = (s.sampler, s.epoch, s.sample_seed);
    let samples: std::result::Result<Vec<SelfSample>, String> = tape.frozen(|t| {
        let d = DepthMap::new(
            target.width(),
            target.height(),
            t.value(depth).data().to_vec(),
        )
        .map_err(|e| e.to_string())?;
        selfsample::generate_batch(target, &d, k, sampler, epoch, seed).map_err(|e| e.to_string())
    });
    let samples = samples.map_err(Error::InvalidArgument)?;
    let mut terms = Vec::with_capacity(samples.len());
    for sample in samples.iter().filter(|x| x.validity.count() > 0) {
        let img = tape.constant(Tensor::from_image(&sample.image));
        let d_hat = net.forward(tape, params, img)?;
        match diff::issl_loss(tape, d_hat, &sample.depth, &sample.validity, s.issl) {
            Ok(v) => terms.push(v),
            Err(e) if e.is_degenerate() => log::debug!("self-sample skipped: {e}"),
            Err(e) => return Err(e),
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let mut sum = terms[0];
    for t in &terms[1..] {
        sum = tape.add(sum, *t)?;
    }
    Ok(Some(tape.mul_scalar(sum, 1.0 / terms.len() as f64)))
}

/// First and second Adam moments for every optimized scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub net_m: Vec<f64>,
    pub net_v: Vec<f64>,
    pub pose_m: Vec<f64>,
    pub pose_v: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub photometric: f64,
    pub smoothness: f64,
    pub issl: f64,
    pub total: f64,
    pub skipped: bool,
}

/// Complete training state; serializing and restoring it resumes training
/// bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epoch of the next step.
    pub epoch: usize,
    /// Steps taken so far.
    pub step: u64,
    pub seed: u64,
    pub net: TinyDepthNet,
    pub poses: PoseVariables,
    pub adam: AdamState,
    pub history: Vec<StepRecord>,
}

impl TrainState {
    pub fn new(config: &TrainConfig, data: &TrainingData) -> Result<Self> {
        config.validate()?;
        let net = TinyDepthNet::init(config.net, config.seed)?;
        let poses = PoseVariables::new(&data.pairs());
        let np = net.param_count();
        let pp = 6 * poses.len();
        Ok(Self {
            epoch: 0,
            step: 0,
            seed: config.seed,
            net,
            poses,
            adam: AdamState {
                t: 0,
                net_m: vec![0.0; np],
                net_v: vec![0.0; np],
                pose_m: vec![0.0; pp],
                pose_v: vec![0.0; pp],
            },
            history: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })
    }
}

/// Losses of one step, averaged over the contributing batch items.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub parts: LossParts,
    pub total: f64,
    /// True when every item was degenerate and no update was made.
    pub skipped: bool,
}

struct ItemResult {
    parts: LossParts,
    total: f64,
    net_grads: Vec<f64>,
    pose_grads: Vec<(usize, Vec<f64>)>,
}

pub struct Trainer<'a> {
    config: TrainConfig,
    data: &'a TrainingData,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, data: &'a TrainingData) -> Result<Self> {
        config.validate()?;
        if data.tuples.iter().any(|t| t.sources.len() != config.n_s) {
            return Err(Error::invalid("training windows do not match n_s"));
        }
        Ok(Self { config, data })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Tuple indices of one step: consecutive slices of per-epoch shuffles.
    pub fn batch_indices(&self, epoch: usize, step_in_epoch: usize) -> Vec<usize> {
        let n = self.data.tuples.len();
        let b = self.config.batch_size;
        let mut perm_cycle = usize::MAX;
        let mut perm: Vec<usize> = Vec::new();
        (step_in_epoch * b..(step_in_epoch + 1) * b)
            .map(|slot| {
                let cycle = slot / n;
                if cycle != perm_cycle {
                    perm = (0..n).collect();
                    let mut r = rng::stream(
                        self.config.seed,
                        Stream::BatchOrder,
                        &[epoch as u64, cycle as u64],
                    );
                    perm.shuffle(&mut r);
                    perm_cycle = cycle;
                }
                perm[slot % n]
            })
            .collect()
    }

    fn item(
        &self,
        state: &TrainState,
        tuple: &TrainingTuple,
        slot: usize,
    ) -> Result<Option<ItemResult>> {
        let mut tape = Tape::new();
        let params = state.net.register(&mut tape);
        let mut pose_idx = Vec::with_capacity(tuple.sources.len());
        let mut poses = Vec::with_capacity(tuple.sources.len());
        for s in &tuple.sources {
            let i = state.poses.index_of(tuple.target, *s).ok_or_else(|| {
                Error::invalid(format!("no pose for pair ({}, {s})", tuple.target))
            })?;
            pose_idx.push(i);
            poses.push(tape.param(Tensor::new(
                vec![6],
                state.poses.entries()[i].params.to_vec(),
            )?));
        }
        let sampler = self.config.sampler();
        let settings = ObjectiveSettings {
            weights: &self.config.weights,
            issl: &self.config.issl,
            sampler: &sampler,
            automask: self.config.automask,
            epoch: state.epoch,
            sample_seed: rng::derive_seed(self.config.seed, &[state.step, slot as u64]),
        };
        let sources: Vec<&Image> = tuple
            .sources
            .iter()
            .map(|s| &self.data.frames[*s])
            .collect();
        let losses = match item_objective(
            &mut tape,
            &state.net,
            &params,
            &poses,
            &self.data.frames[tuple.target],
            &sources,
            &self.data.intrinsics,
            &settings,
        ) {
            Ok(l) => l,
            Err(e) if e.is_degenerate() => {
                log::warn!("step {}: target {} skipped: {e}", state.step, tuple.target);
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        let parts = LossParts {
            photometric: tape.value(losses.photometric).item(),
            smoothness: tape.value(losses.smoothness).item(),
            issl: losses.issl.map_or(0.0, |v| tape.value(v).item()),
        };
        let total = tape.value(losses.total).item();
        let grads = tape.backward(losses.total)?;
        let mut net_grads = Vec::with_capacity(state.net.param_count());
        for (v, p) in params.iter().zip(state.net.params()) {
            net_grads.extend(grads.get_or_zeros(*v, p.data.len()));
        }
        let pose_grads = pose_idx
            .into_iter()
            .zip(&poses)
            .map(|(i, v)| (i, grads.get_or_zeros(*v, 6)))
            .collect();
        Ok(Some(ItemResult {
            parts,
            total,
            net_grads,
            pose_grads,
        }))
    }

    /// One optimization step on the batch scheduled for `state.step`.
    /// Skipped steps report zero losses and leave the parameters untouched.
    pub fn step(&self, state: &mut TrainState) -> Result<StepReport> {
        let step_in_epoch = (state.step % self.config.steps_per_epoch as u64) as usize;
        let batch = self.batch_indices(state.epoch, step_in_epoch);
        let results: Vec<Option<ItemResult>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &ti)| self.item(state, &self.data.tuples[ti], slot))
            .collect::<Result<_>>()?;
        let live: Vec<&ItemResult> = results.iter().flatten().collect();

        let report = if live.is_empty() {
            log::warn!(
                "step {}: every batch item was degenerate; no update",
                state.step
            );
            StepReport {
                parts: LossParts::default(),
                total: 0.0,
                skipped: true,
            }
        } else {
            let scale = 1.0 / live.len() as f64;
            let mut net_g = vec![0.0; state.net.param_count()];
            let mut pose_g = vec![0.0; 6 * state.poses.len()];
            let mut parts = LossParts::default();
            let mut total = 0.0;
            for r in &live {
                for (a, g) in net_g.iter_mut().zip(&r.net_grads) {
                    *a += g * scale;
                }
                for (i, g) in &r.pose_grads {
                    for (a, v) in pose_g[6 * i..6 * i + 6].iter_mut().zip(g) {
                        *a += v * scale;
                    }
                }
                parts.photometric += r.parts.photometric * scale;
                parts.smoothness += r.parts.smoothness * scale;
                parts.issl += r.parts.issl * scale;
                total += r.total * scale;
            }
            self.adam_update(state, &net_g, &pose_g);
            StepReport {
                parts,
                total,
                skipped: false,
            }
        };
        state.history.push(StepRecord {
            step: state.step,
            epoch: state.epoch,
            photometric: report.parts.photometric,
            smoothness: report.parts.smoothness,
            issl: report.parts.issl,
            total: report.total,
            skipped: report.skipped,
        });
        state.step += 1;
        if state
            .step
            .is_multiple_of(self.config.steps_per_epoch as u64)
        {
            state.epoch += 1;
        }
        Ok(report)
    }

    fn adam_update(&self, state: &mut TrainState, net_g: &[f64], pose_g: &[f64]) {
        let AdamConfig { beta1, beta2, eps } = self.config.adam;
        let a = &mut state.adam;
        a.t += 1;
        let c1 = 1.0 - beta1.powi(a.t as i32);
        let c2 = 1.0 - beta2.powi(a.t as i32);
        let lr = self.config.lr_at(state.epoch);
        let update = |g: f64, m: &mut f64, v: &mut f64, lr: f64| -> f64 {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            lr * (*m / c1) / ((*v / c2).sqrt() + eps)
        };
        let mut i = 0;
        for p in state.net.params_mut() {
            for x in &mut p.data {
                let d = update(net_g[i], &mut a.net_m[i], &mut a.net_v[i], lr);
                *x = (*x as f64 - d) as f32;
                i += 1;
            }
        }
        let pose_lr = lr * self.config.pose_lr_scale;
        for (j, e) in state.poses.entries_mut().iter_mut().enumerate() {
            for c in 0..6 {
                let k = 6 * j + c;
                e.params[c] -= update(pose_g[k], &mut a.pose_m[k], &mut a.pose_v[k], pose_lr);
            }
        }
    }

    /// Runs the remaining epochs, evaluating on `eval` after each epoch.
    pub fn fit(
        &self,
        state: &mut TrainState,
        eval: &[EvalFrame],
        eval_settings: &EvalSettings,
        mut on_epoch: impl FnMut(&EpochMetrics, &TrainState) -> Result<()>,
    ) -> Result<()> {
        while state.epoch < self.config.epochs {
            let epoch = state.epoch;
            while state.epoch == epoch {
                let r = self.step(state)?;
                log::debug!("step {} total {:.5}", state.step, r.total);
            }
            let metrics = evaluate_epoch(&state.net, eval, eval_settings, epoch)?;
            if let Some(m) = metrics.mean_abs_rel {
                log::info!("epoch {epoch}: held-out AbsRel {m:.4}");
            }
            on_epoch(&metrics, state)?;
        }
        Ok(())
    }
}

/// Held-out results after one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub frames: Vec<FrameMetrics>,
    pub mean_abs_rel: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub metrics: DepthMetrics,
    pub regions: Option<RegionMetrics>,
}

pub fn evaluate_epoch(
    net: &TinyDepthNet,
    frames: &[EvalFrame],
    settings: &EvalSettings,
    epoch: usize,
) -> Result<EpochMetrics> {
    let frames: Vec<FrameMetrics> = frames
        .iter()
        .map(|f| {
            let pred = net.predict_depth(&f.image)?;
            let valid = ValidityMask::all(f.depth.width(), f.depth.height());
            let metrics = evaluation::compute_metrics(&pred, &f.depth, &valid, settings)?;
            let regions = f
                .instances
                .as_ref()
                .map(|inst| {
                    evaluation::static_dynamic_report(&pred, &f.depth, &valid, inst, settings)
                })
                .transpose()?;
            Ok(FrameMetrics { metrics, regions })
        })
        .collect::<Result<_>>()?;
    let mean_abs_rel = (!frames.is_empty())
        .then(|| frames.iter().map(|f| f.metrics.abs_rel).sum::<f64>() / frames.len() as f64);
    Ok(EpochMetrics {
        epoch,
        frames,
        mean_abs_rel,
    })
}

#[derive(Serialize)]
struct CsvRow {
    step: u64,
    #[serde(rename = "L_p")]
    photometric: f64,
    #[serde(rename = "L_s")]
    smoothness: f64,
    #[serde(rename = "L_issl")]
    issl: f64,
    total: f64,
}

/// Writes the loss history as `step,L_p,L_s,L_issl,total`; skipped steps
/// are written as NaN.
pub fn write_loss_csv(history: &[StepRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in history {
        let v = |x: f64| if r.skipped { f64::NAN } else { x };
        w.serialize(CsvRow {
            step: r.step,
            photometric: v(r.photometric),
            smoothness: v(r.smoothness),
            issl: v(r.issl),
            total: v(r.total),
        })
        .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
