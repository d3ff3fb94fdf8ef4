//! A tiny convolutional depth predictor and per-pair free pose variables.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Padding, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{DepthMap, RigidMotion};
use crate::rng::{self, Stream};
use crate::warp::Image;

const CHECKPOINT_FORMAT: &str = "tiny-depth-net/1";
const INPUT_MEAN: f64 = 0.45;
const INPUT_STD: f64 = 0.225;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Output channels of the two encoder and two decoder convolutions.
    pub widths: [usize; 4],
    pub d_min: f64,
    pub d_max: f64,
    /// When set, the head bias is shifted so the untrained network outputs
    /// roughly this sigmoid value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_disparity: Option<f64>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            widths: [8, 16, 16, 8],
            d_min: 0.1,
            d_max: 100.0,
            init_disparity: None,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::invalid("network widths must be positive"));
        }
        if !(self.d_min > 0.0 && self.d_max > self.d_min && self.d_max.is_finite()) {
            return Err(Error::invalid(format!(
                "need 0 < d_min < d_max, got {} and {}",
                self.d_min, self.d_max
            )));
        }
        if let Some(p) = self.init_disparity {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::invalid(format!(
                    "init_disparity must lie in (0, 1), got {p}"
                )));
            }
        }
        Ok(())
    }

    /// `(name, shape)` of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let [w0, w1, w2, w3] = self.widths;
        let convs = [
            ("enc1", 3, w0),
            ("enc2", w0, w1),
            ("dec1", w1, w2),
            ("dec2", w2, w3),
            ("head", w3, 1),
        ];
        convs
            .iter()
            .flat_map(|(name, cin, cout)| {
                [
                    (format!("{name}.weight"), vec![*cout, *cin, 3, 3]),
                    (format!("{name}.bias"), vec![*cout]),
                ]
            })
            .collect()
    }

    /// Maps a sigmoid output to depth: `1 / (a·σ + b)`.
    pub fn disparity_to_depth(&self, sigma: f64) -> f64 {
        let (a, b) = self.disparity_coefficients();
        1.0 / (a * sigma + b)
    }

    fn disparity_coefficients(&self) -> (f64, f64) {
        (1.0 / self.d_min - 1.0 / self.d_max, 1.0 / self.d_max)
    }
}

/// A named parameter tensor stored at single precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Encoder-decoder predicting depth at input resolution:
/// two stride-2 convolutions, two upsample-and-convolve stages, and a
/// sigmoid head mapped into `[d_min, d_max]`. Softplus activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyDepthNet {
    config: NetConfig,
    params: Vec<Parameter>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    config: NetConfig,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

impl TinyDepthNet {
    /// Weights and biases uniform on `±1/√fan_in`, plus the optional head
    /// bias shift of [`NetConfig::init_disparity`].
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, Stream::WeightInit, &[]);
        let layout = config.layout();
        let mut params = Vec::with_capacity(layout.len());
        let mut fan_in = 1;
        for (name, shape) in layout {
            if shape.len() == 4 {
                fan_in = shape[1] * shape[2] * shape[3];
            }
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let mut data: Vec<f32> = (0..n)
                .map(|_| r.random_range(-bound..bound) as f32)
                .collect();
            if let (Some(p), "head.bias") = (config.init_disparity, name.as_str()) {
                let logit = (p / (1.0 - p)).ln();
                data.iter_mut().for_each(|b| *b += logit as f32);
            }
            params.push(Parameter { name, shape, data });
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Records every parameter on the tape as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.param(param_tensor(p)))
            .collect()
    }

    /// Records every parameter as a constant.
    pub fn register_constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.constant(param_tensor(p)))
            .collect()
    }

    /// Depth `[1, H, W]` of an image `[3, H, W]`; `H` and `W` must be multiples of 4.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], image: Var) -> Result<Var> {
        if params.len() != self.params.len() {
            return Err(Error::shape(format!(
                "expected {} parameter handles, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let (c, h, w) = tape.value(image).chw()?;
        if c != 3 || h % 4 != 0 || w % 4 != 0 || h < 8 || w < 8 {
            return Err(Error::shape(format!(
                "network input must be 3-channel with sides multiple of 4 and at least 8, got {c}x{h}x{w}"
            )));
        }
        let x = tape.add_scalar(image, -INPUT_MEAN);
        let x = tape.mul_scalar(x, 1.0 / INPUT_STD);
        let conv = |tape: &mut Tape, x: Var, i: usize, stride: usize| {
            tape.conv2d(
                x,
                params[2 * i],
                Some(params[2 * i + 1]),
                stride,
                Padding::Reflect,
            )
        };
        let x = conv(tape, x, 0, 2)?;
        let x = tape.softplus(x);
        let x = conv(tape, x, 1, 2)?;
        let x = tape.softplus(x);
        let x = tape.upsample_nearest(x, 2)?;
        let x = conv(tape, x, 2, 1)?;
        let x = tape.softplus(x);
        let x = tape.upsample_nearest(x, 2)?;
        let x = conv(tape, x, 3, 1)?;
        let x = tape.softplus(x);
        let x = conv(tape, x, 4, 1)?;
        let sigma = tape.sigmoid(x);
        let (a, b) = self.config.disparity_coefficients();
        let disp = tape.mul_scalar(sigma, a);
        let disp = tape.add_scalar(disp, b);
        let ones = tape.constant(Tensor::full(&[1, h, w], 1.0));
        tape.div(ones, disp)
    }

    /// Inference without gradients.
    pub fn predict_depth(&self, image: &Image) -> Result<DepthMap> {
        let mut tape = Tape::new();
        let params = self.register_constants(&mut tape);
        let x = tape.constant(Tensor::from_image(image));
        let d = self.forward(&mut tape, &params, x)?;
        DepthMap::new(image.width(), image.height(), tape.value(d).data().to_vec())
    }

    /// Length-prefixed JSON manifest followed by a little-endian `f32` blob.
    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config,
            tensors: self
                .params
                .iter()
                .map(|p| ManifestEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&manifest).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        let mut bytes = Vec::with_capacity(8 + header.len() + 4 * self.param_count());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        for p in &self.params {
            for v in &p.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |msg: String| Error::format(path, msg);
        if bytes.len() < 8 {
            return Err(bad("file too short for a checkpoint header".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let header = bytes
            .get(8..8usize.saturating_add(header_len))
            .ok_or_else(|| bad(format!("header length {header_len} exceeds file size")))?;
        let manifest: Manifest =
            serde_json::from_slice(header).map_err(|e| bad(format!("bad manifest: {e}")))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(bad(format!(
                "unknown checkpoint format {:?}",
                manifest.format
            )));
        }
        manifest.config.validate().map_err(|e| bad(e.to_string()))?;
        let expected: Vec<ManifestEntry> = manifest
            .config
            .layout()
            .into_iter()
            .map(|(name, shape)| ManifestEntry { name, shape })
            .collect();
        if manifest.tensors != expected {
            return Err(bad(
                "tensor manifest does not match the network layout".into()
            ));
        }
        let blob = &bytes[8 + header_len..];
        let total: usize = expected
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum();
        if blob.len() != 4 * total {
            return Err(bad(format!(
                "parameter blob holds {} bytes, manifest needs {}",
                blob.len(),
                4 * total
            )));
        }
        let mut values = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let params = expected
            .into_iter()
            .map(|e| {
                let n = e.shape.iter().product();
                Parameter {
                    name: e.name,
                    shape: e.shape,
                    data: values.by_ref().take(n).collect(),
                }
            })
            .collect();
        Ok(Self {
            config: manifest.config,
            params,
        })
    }
}

fn param_tensor(p: &Parameter) -> Tensor {
    Tensor::from_parts(p.shape.clone(), p.data.iter().map(|v| *v as f64).collect())
}

/// One free 6-vector motion per training pair, keyed by `(target, source)` frame indices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseVariables {
    entries: Vec<PoseEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEntry {
    pub target: usize,
    pub source: usize,
    pub params: [f64; 6],
}

impl PoseVariables {
    /// Zero motion for every pair.
    pub fn new(pairs: &[(usize, usize)]) -> Self {
        let mut entries: Vec<PoseEntry> = pairs
            .iter()
            .map(|&(target, source)| PoseEntry {
                target,
                source,
                params: [0.0; 6],
            })
            .collect();
        entries.sort_by_key(|e| (e.target, e.source));
        entries.dedup_by_key(|e| (e.target, e.source));
        Self { entries }
    }

    pub fn index_of(&self, target: usize, source: usize) -> Option<usize> {
        self.entries
            .binary_search_by_key(&(target, source), |e| (e.target, e.source))
            .ok()
    }

    pub fn entries(&self) -> &[PoseEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [PoseEntry] {
        &mut self.entries
    }

    pub fn motion(&self, target: usize, source: usize) -> Option<RigidMotion> {
        self.index_of(target, source)
            .and_then(|i| RigidMotion::from_slice(&self.entries[i].params).ok())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> NetConfig {
        NetConfig {
            widths: [2, 3, 3, 2],
            ..Default::default()
        }
    }

    fn image(w: usize, h: usize, seed: u64) -> Image {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Image::new(
            w,
            h,
            3,
            (0..w * h * 3).map(|_| r.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn depth_mapping_endpoints() {
        let c = NetConfig::default();
        assert!((c.disparity_to_depth(1.0) - 0.1).abs() < 1e-12);
        assert!((c.disparity_to_depth(0.0) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn output_shape_and_range() {
        for seed in 0..5 {
            let mut net = TinyDepthNet::init(NetConfig::default(), seed).unwrap();
            // exaggerate the weights to push the sigmoid toward saturation
            for p in net.params_mut() {
                for v in &mut p.data {
                    *v *= 20.0 * (seed as f32 + 1.0);
                }
            }
            let d = net.predict_depth(&image(16, 8, seed)).unwrap();
            assert_eq!((d.width(), d.height()), (16, 8));
            assert!(d.values().iter().all(|v| (0.1..=100.0).contains(v)));
        }
        let net = TinyDepthNet::init(NetConfig::default(), 0).unwrap();
        assert!(net.predict_depth(&image(10, 8, 0)).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = TinyDepthNet::init(NetConfig::default(), 3).unwrap();
        let b = TinyDepthNet::init(NetConfig::default(), 3).unwrap();
        let c = TinyDepthNet::init(NetConfig::default(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = 1.0 / 27f32.sqrt();
        assert!(a.params()[0].data.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn init_disparity_sets_the_starting_output() {
        let cfg = NetConfig {
            init_disparity: Some(0.05),
            ..Default::default()
        };
        let d = TinyDepthNet::init(cfg, 1)
            .unwrap()
            .predict_depth(&image(16, 8, 1))
            .unwrap();
        let (lo, hi) = (1.0 / cfg.d_max, 1.0 / cfg.d_min);
        let sigma: f64 = d
            .values()
            .iter()
            .map(|z| (1.0 / z - lo) / (hi - lo))
            .sum::<f64>()
            / d.values().len() as f64;
        assert!((0.03..0.08).contains(&sigma), "{sigma}");
        assert!(NetConfig {
            init_disparity: Some(1.0),
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = TinyDepthNet::init(NetConfig::default(), 7).unwrap();
        net.save(&path).unwrap();
        let back = TinyDepthNet::load(&path).unwrap();
        assert_eq!(back, net);
        assert_eq!(fs::read(&path).unwrap(), {
            back.save(&path).unwrap();
            fs::read(&path).unwrap()
        });
    }

    #[test]
    fn checkpoint_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = TinyDepthNet::init(NetConfig::default(), 7).unwrap();
        net.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[8..8 + len].to_vec()).unwrap();
        let tampered = header.replacen("[8,3,3,3]", "[8,3,3,2]", 1);
        assert_ne!(tampered, header);
        let mut out = (tampered.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[8 + len..]);
        fs::write(&path, &out).unwrap();
        assert!(matches!(
            TinyDepthNet::load(&path),
            Err(Error::Format { .. })
        ));

        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            TinyDepthNet::load(&path),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn parameter_gradients_pass_gradcheck() {
        let net = TinyDepthNet::init(small(), 1).unwrap();
        let img = image(8, 8, 2);
        let target = image(8, 8, 3);
        let inputs: Vec<Tensor> = net.params().iter().map(param_tensor).collect();
        let report = grad_check(
            |t, v| {
                let x = t.constant(Tensor::from_image(&img));
                let d = net.forward(t, v, x)?;
                let d = t.mul_scalar(d, 0.1);
                let g = t.constant(Tensor::new(vec![1, 8, 8], target.plane(0).to_vec())?);
                let diff = t.sub(d, g)?;
                let diff = t.abs(diff);
                Ok(t.mean(diff))
            },
            &inputs,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn pose_variables_lookup() {
        let p = PoseVariables::new(&[(2, 3), (1, 0), (1, 2), (2, 1), (1, 0)]);
        assert_eq!(p.len(), 4);
        assert_eq!(p.index_of(1, 0), Some(0));
        assert_eq!(p.index_of(2, 3), Some(3));
        assert_eq!(p.index_of(5, 4), None);
        assert!(p.motion(1, 2).unwrap().is_zero());
    }
}
