//! Sequence directories: frame PNGs, optional ground truth and a
//! `sequence.json` manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthMap, RigidMotion};
use crate::io;
use crate::synthdata::{RenderedFrame, SceneSpec};
use crate::training::TrainingData;
use crate::warp::{Image, InstanceMask};

pub const MANIFEST_FILE: &str = "sequence.json";
/// Fallback location of the intrinsics when the manifest has none.
pub const INTRINSICS_FILE: &str = "intrinsics.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub index: usize,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instances: Option<String>,
    /// World-to-camera pose.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<RigidMotion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceManifest {
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<CameraIntrinsics>,
    /// When empty, frames are the PNGs in the directory whose stem is a
    /// frame number, in numeric order.
    #[serde(default)]
    pub frames: Vec<FrameEntry>,
}

#[derive(Debug, Clone)]
pub struct SequenceFrame {
    pub index: usize,
    pub image: Image,
    pub depth: Option<DepthMap>,
    pub instances: Option<InstanceMask>,
    pub pose: Option<RigidMotion>,
}

#[derive(Debug, Clone)]
pub struct Sequence {
    pub dir: PathBuf,
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<SequenceFrame>,
}

pub fn frame_stem(index: usize) -> String {
    format!("{index:06}")
}

/// Writes rendered frames as `NNNNNN.png`, `NNNNNN_depth.pfm`,
/// `NNNNNN_instances.png`, plus `sequence.json` and the scene itself as
/// `scene.json`.
pub fn write_rendered(
    dir: &Path,
    spec: &SceneSpec,
    frames: &[RenderedFrame],
) -> Result<SequenceManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let stem = frame_stem(i);
        let entry = FrameEntry {
            index: i,
            image: format!("{stem}.png"),
            depth: Some(format!("{stem}_depth.pfm")),
            instances: Some(format!("{stem}_instances.png")),
            pose: Some(f.pose),
        };
        io::write_image(&f.image, &dir.join(&entry.image))?;
        io::write_pfm(
            &f.depth,
            &dir.join(entry.depth.as_ref().expect("set above")),
        )?;
        io::write_instances(
            &f.instances,
            &dir.join(entry.instances.as_ref().expect("set above")),
        )?;
        entries.push(entry);
    }
    let manifest = SequenceManifest {
        width: spec.width,
        height: spec.height,
        intrinsics: Some(spec.intrinsics),
        frames: entries,
    };
    io::write_json(&manifest, &dir.join(MANIFEST_FILE))?;
    io::write_json(spec, &dir.join("scene.json"))?;
    Ok(manifest)
}

fn discover_frames(dir: &Path) -> Result<Vec<FrameEntry>> {
    let mut found: Vec<(usize, String)> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let stem = name.strip_suffix(".png")?;
            (!stem.is_empty() && stem.bytes().all(|b| b.is_ascii_digit()))
                .then(|| stem.parse().ok().map(|i| (i, name.clone())))?
        })
        .collect();
    found.sort();
    Ok(found
        .into_iter()
        .map(|(index, image)| FrameEntry {
            index,
            image,
            depth: None,
            instances: None,
            pose: None,
        })
        .collect())
}

fn resolve_intrinsics(dir: &Path, manifest: &SequenceManifest) -> Result<CameraIntrinsics> {
    if let Some(k) = manifest.intrinsics {
        k.validate()
            .map_err(|e| Error::format(dir.join(MANIFEST_FILE), format!("intrinsics: {e}")))?;
        return Ok(k);
    }
    let path = dir.join(INTRINSICS_FILE);
    if !path.exists() {
        return Err(Error::invalid(format!(
            "no camera intrinsics for {}: {MANIFEST_FILE} has no `intrinsics` field and {} does not exist",
            dir.display(),
            path.display()
        )));
    }
    CameraIntrinsics::from_json_file(&path)
}

/// Loads a sequence directory, checking that every file matches the
/// manifest resolution.
pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::invalid(format!(
            "missing {}",
            manifest_path.display()
        )));
    }
    let manifest: SequenceManifest = io::read_json(&manifest_path)?;
    let intrinsics = resolve_intrinsics(dir, &manifest)?;
    let entries = if manifest.frames.is_empty() {
        discover_frames(dir)?
    } else {
        manifest.frames.clone()
    };
    let (w, h) = (manifest.width, manifest.height);
    let check = |path: &Path, fw: usize, fh: usize| {
        if (fw, fh) == (w, h) {
            Ok(())
        } else {
            Err(Error::format(
                path,
                format!("size {fw}x{fh} differs from the manifest's {w}x{h}"),
            ))
        }
    };
    let mut frames = Vec::with_capacity(entries.len());
    for e in entries {
        let path = dir.join(&e.image);
        let image = io::read_image(&path)?;
        check(&path, image.width(), image.height())?;
        let depth = e
            .depth
            .as_ref()
            .map(|d| {
                let p = dir.join(d);
                let depth = io::read_depth(&p)?;
                check(&p, depth.width(), depth.height())?;
                Ok(depth)
            })
            .transpose()?;
        let instances = e
            .instances
            .as_ref()
            .map(|d| {
                let p = dir.join(d);
                let m = io::read_instances(&p)?;
                check(&p, m.width(), m.height())?;
                Ok(m)
            })
            .transpose()?;
        frames.push(SequenceFrame {
            index: e.index,
            image,
            depth,
            instances,
            pose: e.pose,
        });
    }
    if frames.windows(2).any(|p| p[1].index <= p[0].index) {
        return Err(Error::format(manifest_path, "frame indices must increase"));
    }
    Ok(Sequence {
        dir: dir.to_path_buf(),
        intrinsics,
        frames,
    })
}

impl Sequence {
    /// Sliding training windows over the frames (see
    /// [`crate::training::sliding_windows`]).
    pub fn training_data(&self, n_s: usize) -> Result<TrainingData> {
        TrainingData::new(
            self.intrinsics,
            self.frames.iter().map(|f| f.image.clone()).collect(),
            n_s,
        )
    }
}
