//! Named finite-difference checks covering every differentiable tape op,
//! the loss terms, the depth network and the full training objective, all
//! on 8×8 inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, GradCheckConfig, GradCheckReport, Padding, Tape, Tensor, Var};
use crate::error::Result;
use crate::geometry::{CameraIntrinsics, DepthMap};
use crate::losses::{diff, IsslOptions, LossWeights, Reduction};
use crate::model::{NetConfig, TinyDepthNet};
use crate::selfsample::SamplerConfig;
use crate::training::{item_objective, ObjectiveSettings};
use crate::warp::{Image, ValidityMask};

pub const SIZE: usize = 8;

type CheckFn = fn(u64, &GradCheckConfig) -> Result<GradCheckReport>;

#[derive(Clone, Copy)]
pub struct NamedCheck {
    pub name: &'static str,
    run: CheckFn,
}

impl NamedCheck {
    pub fn run(&self, seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
        (self.run)(seed, cfg)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(salt))
}

fn random(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.random_range(lo..hi)).collect(),
    )
    .expect("shape matches")
}

fn random_image(r: &mut ChaCha8Rng) -> Image {
    let t = random(&[3, SIZE, SIZE], 0.0, 1.0, r);
    Image::new(SIZE, SIZE, 3, t.into_data()).expect("shape matches")
}

fn intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(7.0, 6.0, 3.5, 3.5).expect("valid intrinsics")
}

/// Reduces any output to a scalar with fixed random weights, so every
/// element contributes a distinct amount.
fn weighted_sum(t: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(v).to_vec();
    let w = t.constant(random(&shape, -1.0, 1.0, &mut rng(seed, 99)));
    let p = t.mul(v, w)?;
    Ok(t.sum(p))
}

fn image3(seed: u64) -> Tensor {
    random(&[3, SIZE, SIZE], -2.0, 2.0, &mut rng(seed, 1))
}

fn positive3(seed: u64) -> Tensor {
    random(&[3, SIZE, SIZE], 0.5, 2.0, &mut rng(seed, 2))
}

macro_rules! binary {
    ($name:literal, $op:ident) => {
        NamedCheck {
            name: $name,
            run: |seed, cfg| {
                grad_check(
                    |t, v| {
                        let y = t.$op(v[0], v[1])?;
                        weighted_sum(t, y, seed)
                    },
                    &[image3(seed), positive3(seed)],
                    cfg,
                )
            },
        }
    };
}

macro_rules! unary {
    ($name:literal, $op:ident) => {
        NamedCheck {
            name: $name,
            run: |seed, cfg| {
                grad_check(
                    |t, v| {
                        let y = t.$op(v[0]);
                        weighted_sum(t, y, seed)
                    },
                    &[image3(seed)],
                    cfg,
                )
            },
        }
    };
}

fn conv_check(
    seed: u64,
    cfg: &GradCheckConfig,
    stride: usize,
    padding: Padding,
) -> Result<GradCheckReport> {
    let mut r = rng(seed, 3);
    let x = random(&[2, SIZE, SIZE], -1.0, 1.0, &mut r);
    let w = random(&[3, 2, 3, 3], -0.5, 0.5, &mut r);
    let b = random(&[3], -0.5, 0.5, &mut r);
    grad_check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, padding)?;
            weighted_sum(t, y, seed)
        },
        &[x, w, b],
        cfg,
    )
}

fn motion(r: &mut ChaCha8Rng) -> Tensor {
    let m: Vec<f64> = (0..6)
        .map(|i| r.random_range(-0.1..0.1) * if i < 3 { 1.0 } else { 2.0 })
        .collect();
    Tensor::new(vec![6], m).expect("six values")
}

fn small_net() -> NetConfig {
    NetConfig {
        widths: [2, 3, 3, 2],
        ..Default::default()
    }
}

fn net_inputs(net: &TinyDepthNet) -> Vec<Tensor> {
    net.params()
        .iter()
        .map(|p| {
            Tensor::new(p.shape.clone(), p.data.iter().map(|v| *v as f64).collect())
                .expect("shape matches")
        })
        .collect()
}

/// The full per-target objective: photometric term with per-pixel minimum
/// and automask, smoothness, and the consistency term over re-inferred
/// self-samples, differentiated w.r.t. network weights and both poses.
fn objective_check(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut r = rng(seed, 20);
    let frames: Vec<Image> = (0..3).map(|_| random_image(&mut r)).collect();
    let net = TinyDepthNet::init(small_net(), seed)?;
    let k = intrinsics();
    let weights = LossWeights::default();
    let issl = IsslOptions::default();
    let sampler = SamplerConfig {
        n_k: 2,
        theta_r_start: 0.05,
        ..Default::default()
    };
    let mut inputs = net_inputs(&net);
    let np = inputs.len();
    for _ in 0..2 {
        let m: Vec<f64> = (0..6).map(|_| r.random_range(-0.02..0.02)).collect();
        inputs.push(Tensor::new(vec![6], m)?);
    }
    grad_check(
        |t, v| {
            let settings = ObjectiveSettings {
                weights: &weights,
                issl: &issl,
                sampler: &sampler,
                automask: true,
                epoch: 0,
                sample_seed: seed,
            };
            let l = item_objective(
                t,
                &net,
                &v[..np],
                &v[np..],
                &frames[1],
                &[&frames[0], &frames[2]],
                &k,
                &settings,
            )?;
            Ok(l.total)
        },
        &inputs,
        cfg,
    )
}

/// Every registered check.
pub fn all_checks() -> Vec<NamedCheck> {
    vec![
        binary!("add", add),
        binary!("sub", sub),
        binary!("mul", mul),
        binary!("div", div),
        binary!("min", min),
        unary!("exp", exp),
        unary!("abs", abs),
        unary!("sigmoid", sigmoid),
        unary!("softplus", softplus),
        NamedCheck {
            name: "clamp+scalar",
            run: |seed, cfg| {
                grad_check(
                    |t, v| {
                        let y = t.clamp(v[0], -0.5, 0.7);
                        let y = t.mul_scalar(y, 3.0);
                        let y = t.add_scalar(y, 1.0);
                        weighted_sum(t, y, seed)
                    },
                    &[image3(seed)],
                    cfg,
                )
            },
        },
        NamedCheck {
            name: "sum+mean",
            run: |seed, cfg| {
                grad_check(
                    |t, v| {
                        let s = t.sum(v[0]);
                        let m = t.mean(v[0]);
                        let p = t.mul(s, m)?;
                        Ok(t.mul_scalar(p, 1e-2))
                    },
                    &[image3(seed)],
                    cfg,
                )
            },
        },
        NamedCheck {
            name: "masked_mean",
            run: |seed, cfg| {
                let mask: Vec<f64> = (0..3 * SIZE * SIZE)
                    .map(|i| !(i as u64 * 7 + seed).is_multiple_of(3) as u8 as f64)
                    .collect();
                grad_check(|t, v| t.masked_mean(v[0], &mask), &[image3(seed)], cfg)
            },
        },
        NamedCheck {
            name: "channel_mean+expand+crop",
            run: |seed, cfg| {
                grad_check(
                    |t, v| {
                        let m = t.channel_mean(v[0])?;
                        let e = t.expand_channels(m, 2)?;
                        let c = t.crop(e, 1, 2, 5, 4)?;
                        weighted_sum(t, c, seed)
                    },
                    &[image3(seed)],
                    cfg,
                )
            },
        },
        NamedCheck {
            name: "broadcast",
            run: |seed, cfg| {
                grad_check(
                    |t, v| {
                        let s = t.mean(v[0]);
                        let b = t.broadcast(s, &[1, SIZE, SIZE])?;
                        let b = t.exp(b);
                        weighted_sum(t, b, seed)
                    },
                    &[image3(seed)],
                    cfg,
                )
            },
        },
        NamedCheck {
            name: "conv2d stride1 zero",
            run: |seed, cfg| conv_check(seed, cfg, 1, Padding::Zero),
        },
        NamedCheck {
            name: "conv2d stride1 reflect",
            run: |seed, cfg| conv_check(seed, cfg, 1, Padding::Reflect),
        },
        NamedCheck {
            name: "conv2d stride2 zero",
            run: |seed, cfg| conv_check(seed, cfg, 2, Padding::Zero),
        },
        NamedCheck {
            name: "conv2d stride2 reflect",
            run: |seed, cfg| conv_check(seed, cfg, 2, Padding::Reflect),
        },
        NamedCheck {
            name: "upsample_nearest",
            run: |seed, cfg| {
                grad_check(
                    |t, v| {
                        let y = t.upsample_nearest(v[0], 2)?;
                        weighted_sum(t, y, seed)
                    },
                    &[image3(seed)],
                    cfg,
                )
            },
        },
        NamedCheck {
            name: "box_filter3",
            run: |seed, cfg| {
                grad_check(
                    |t, v| {
                        let y = t.box_filter3(v[0])?;
                        weighted_sum(t, y, seed)
                    },
                    &[image3(seed)],
                    cfg,
                )
            },
        },
        NamedCheck {
            name: "matmul",
            run: |seed, cfg| {
                let mut r = rng(seed, 4);
                let a = random(&[SIZE, SIZE], -1.0, 1.0, &mut r);
                let b = random(&[SIZE, SIZE], -1.0, 1.0, &mut r);
                grad_check(
                    |t, v| {
                        let y = t.matmul(v[0], v[1])?;
                        weighted_sum(t, y, seed)
                    },
                    &[a, b],
                    cfg,
                )
            },
        },
        NamedCheck {
            name: "bilinear_sample",
            run: |seed, cfg| {
                let mut r = rng(seed, 5);
                let image = random(&[3, SIZE, SIZE], 0.0, 1.0, &mut r);
                let grid = random(&[2, SIZE, SIZE], 0.0, (SIZE - 1) as f64, &mut r);
                grad_check(
                    |t, v| {
                        let y = t.bilinear_sample(v[0], v[1])?;
                        weighted_sum(t, y, seed)
                    },
                    &[image, grid],
                    cfg,
                )
            },
        },
        NamedCheck {
            name: "lift",
            run: |seed, cfg| {
                let depth = random(&[1, SIZE, SIZE], 1.0, 5.0, &mut rng(seed, 6));
                grad_check(
                    |t, v| {
                        let p = t.lift(v[0], &intrinsics())?;
                        weighted_sum(t, p, seed)
                    },
                    &[depth],
                    cfg,
                )
            },
        },
        NamedCheck {
            name: "rigid_transform",
            run: |seed, cfg| {
                let mut r = rng(seed, 7);
                let points = random(&[3, SIZE, SIZE], -2.0, 2.0, &mut r);
                let m = motion(&mut r);
                grad_check(
                    |t, v| {
                        let p = t.rigid_transform(v[0], v[1])?;
                        weighted_sum(t, p, seed)
                    },
                    &[points, m],
                    cfg,
                )
            },
        },
        NamedCheck {
            name: "project",
            run: |seed, cfg| {
                let mut r = rng(seed, 8);
                let mut points = random(&[3, SIZE, SIZE], -1.0, 1.0, &mut r);
                for z in &mut points.data_mut()[2 * SIZE * SIZE..] {
                    *z = 2.0 + 2.0 * z.abs();
                }
                grad_check(
                    |t, v| {
                        let g = t.project(v[0], &intrinsics(), 1e-3)?;
                        weighted_sum(t, g, seed)
                    },
                    &[points],
                    cfg,
                )
            },
        },
        NamedCheck {
            name: "warp chain",
            run: |seed, cfg| {
                let mut r = rng(seed, 9);
                let image = random(&[3, SIZE, SIZE], 0.0, 1.0, &mut r);
                let depth = random(&[1, SIZE, SIZE], 2.0, 5.0, &mut r);
                let m = motion(&mut r);
                grad_check(
                    |t, v| {
                        let p = t.lift(v[1], &intrinsics())?;
                        let p = t.rigid_transform(p, v[2])?;
                        let g = t.project(p, &intrinsics(), 1e-3)?;
                        let s = t.bilinear_sample(v[0], g)?;
                        weighted_sum(t, s, seed)
                    },
                    &[image, depth, m],
                    cfg,
                )
            },
        },
        NamedCheck {
            name: "photometric+min_reprojection",
            run: |seed, cfg| {
                let mut r = rng(seed, 10);
                let target = random(&[3, SIZE, SIZE], 0.0, 1.0, &mut r);
                let a = random(&[3, SIZE, SIZE], 0.0, 1.0, &mut r);
                let b = random(&[3, SIZE, SIZE], 0.0, 1.0, &mut r);
                grad_check(
                    |t, v| {
                        let tv = t.constant(target.clone());
                        let maps = [
                            diff::photometric_map(t, v[0], tv, 0.15)?,
                            diff::photometric_map(t, v[1], tv, 0.15)?,
                        ];
                        let m = diff::min_reprojection(t, &maps)?;
                        Ok(t.mean(m))
                    },
                    &[a, b],
                    cfg,
                )
            },
        },
        NamedCheck {
            name: "smoothness",
            run: |seed, cfg| {
                let mut r = rng(seed, 11);
                let image = random_image(&mut r);
                let depth = random(&[1, SIZE, SIZE], 1.0, 6.0, &mut r);
                grad_check(|t, v| diff::smoothness_loss(t, v[0], &image), &[depth], cfg)
            },
        },
        NamedCheck {
            name: "consistency",
            run: |seed, cfg| {
                let mut r = rng(seed, 12);
                let depth = random(&[1, SIZE, SIZE], 1.0, 6.0, &mut r);
                let d_self = DepthMap::new(
                    SIZE,
                    SIZE,
                    random(&[SIZE * SIZE], 0.5, 8.0, &mut r).into_data(),
                )?;
                let mask = ValidityMask::new(
                    SIZE,
                    SIZE,
                    (0..SIZE * SIZE)
                        .map(|i| !(i as u64 + seed).is_multiple_of(4))
                        .collect(),
                )?;
                let opts = IsslOptions {
                    median_scaling: true,
                    reduction: Reduction::Mean,
                };
                grad_check(
                    |t, v| diff::issl_loss(t, v[0], &d_self, &mask, &opts),
                    &[depth],
                    cfg,
                )
            },
        },
        NamedCheck {
            name: "depth network",
            run: |seed, cfg| {
                let net = TinyDepthNet::init(small_net(), seed)?;
                let mut r = rng(seed, 13);
                let image = random(&[3, SIZE, SIZE], 0.0, 1.0, &mut r);
                grad_check(
                    |t, v| {
                        let x = t.constant(image.clone());
                        let d = net.forward(t, v, x)?;
                        weighted_sum(t, d, seed)
                    },
                    &net_inputs(&net),
                    cfg,
                )
            },
        },
        NamedCheck {
            name: "training objective",
            run: objective_check,
        },
    ]
}

/// Runs every check over `seeds`, stopping at the first hard error.
pub fn run_all(seeds: std::ops::Range<u64>, cfg: &GradCheckConfig) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for check in all_checks() {
        for seed in seeds.clone() {
            let report = check.run(seed, cfg)?;
            out.push(CheckOutcome {
                name: check.name,
                seed,
                report,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_on_two_seeds() {
        let outcomes = run_all(0..2, &GradCheckConfig::default()).unwrap();
        for o in &outcomes {
            assert!(
                o.report.passed,
                "{} seed {}: {:?}",
                o.name, o.seed, o.report
            );
        }
        assert_eq!(outcomes.len(), 2 * all_checks().len());
    }
}
