//! Sequence manifests: a TOML file naming the sensor, class mapping, poses
//! and the ordered frames of one sequence. Relative paths are resolved
//! against the manifest's directory.
//!
//! ```toml
//! format_version = 1
//! sensor = "sensor.toml"
//! mapping = "mapping.toml"
//! poses = "poses.txt"
//! calib = "calib.txt"        # optional
//!
//! [[frames]]
//! scan = "scans/000000.bin"
//! label = "labels/000000.label"  # optional
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::kitti::{
    read_labels, read_poses, read_scan, write_calib, write_labels, write_poses, write_scan,
};
use super::mapping::ClassMapping;
use super::synthetic::{SyntheticFrame, SyntheticSceneSpec};
use crate::alignment::RigidTransform;
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, SensorConfig, SensorModel};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub scan: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceManifest {
    pub format_version: u32,
    pub sensor: PathBuf,
    pub mapping: PathBuf,
    pub poses: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calib: Option<PathBuf>,
    pub frames: Vec<FrameRecord>,
}

/// One loaded frame. `labels` holds training ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub cloud: PointCloud,
    pub labels: Option<Vec<u32>>,
    pub pose: RigidTransform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub sensor: SensorModel,
    pub mapping: ClassMapping,
    pub frames: Vec<Frame>,
}

impl Sequence {
    /// In-memory sequence from generated frames, mapping raw ids to train ids.
    pub fn from_synthetic(
        name: impl Into<String>,
        spec: &SyntheticSceneSpec,
        frames: &[SyntheticFrame],
        mapping: &ClassMapping,
    ) -> Result<Self> {
        let frames = frames
            .iter()
            .map(|f| {
                let labels = f
                    .labels
                    .iter()
                    .map(|&l| mapping.map(l))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Frame {
                    cloud: f.cloud.clone(),
                    labels: Some(labels),
                    pose: f.pose,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: name.into(),
            sensor: SensorModel::from_config(&spec.sensor)?,
            mapping: mapping.clone(),
            frames,
        })
    }
}

pub fn read_sensor_config(path: &Path) -> Result<SensorModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: SensorConfig =
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    SensorModel::from_config(&cfg)
}

impl SequenceManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::format(
                path,
                format!("manifest format_version {} unsupported", m.format_version),
            ));
        }
        if m.frames.is_empty() {
            return Err(Error::format(path, "manifest lists no frames"));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Reads every file referenced by the manifest at `path`.
pub fn load_sequence(path: &Path) -> Result<Sequence> {
    let m = SequenceManifest::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let at = |p: &Path| base.join(p);
    let sensor = read_sensor_config(&at(&m.sensor))?;
    let mapping = ClassMapping::load(&at(&m.mapping))?;
    let calib = m.calib.as_ref().map(|c| at(c));
    let poses = read_poses(&at(&m.poses), calib.as_deref())?;
    if poses.len() != m.frames.len() {
        return Err(Error::Sequence(format!(
            "{}: {} poses for {} frames",
            path.display(),
            poses.len(),
            m.frames.len()
        )));
    }
    let mut frames = Vec::with_capacity(m.frames.len());
    for (rec, pose) in m.frames.iter().zip(poses) {
        let cloud = read_scan(&at(&rec.scan))?;
        let labels = match &rec.label {
            Some(l) => {
                let lp = at(l);
                let labels = read_labels(&lp, &mapping)?;
                if labels.len() != cloud.len() {
                    return Err(Error::format(
                        &lp,
                        format!("{} labels for {} points", labels.len(), cloud.len()),
                    ));
                }
                Some(labels)
            }
            None => None,
        };
        frames.push(Frame {
            cloud,
            labels,
            pose,
        });
    }
    let name = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Sequence {
        name,
        sensor,
        mapping,
        frames,
    })
}

/// Writes rendered frames as scans, labels, poses, an identity calibration,
/// the sensor and mapping configs and `manifest.toml` under `dir`. Returns
/// the manifest path.
pub fn write_sequence(
    dir: &Path,
    spec: &SyntheticSceneSpec,
    frames: &[SyntheticFrame],
    mapping: &ClassMapping,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let scan = PathBuf::from(format!("scans/{i:06}.bin"));
        let label = PathBuf::from(format!("labels/{i:06}.label"));
        write_scan(&dir.join(&scan), &f.cloud)?;
        write_labels(&dir.join(&label), &f.labels)?;
        records.push(FrameRecord {
            scan,
            label: Some(label),
        });
    }
    let poses: Vec<_> = frames.iter().map(|f| f.pose).collect();
    write_poses(&dir.join("poses.txt"), &poses)?;
    write_calib(&dir.join("calib.txt"), &RigidTransform::identity())?;
    let sensor_text = toml::to_string(&spec.sensor).map_err(|e| Error::config(e.to_string()))?;
    let sp = dir.join("sensor.toml");
    std::fs::write(&sp, sensor_text).map_err(|e| Error::io(&sp, e))?;
    let mp = dir.join("mapping.toml");
    std::fs::write(&mp, mapping.to_toml()).map_err(|e| Error::io(&mp, e))?;
    let sc = dir.join("scene.toml");
    std::fs::write(&sc, spec.to_toml()).map_err(|e| Error::io(&sc, e))?;
    let manifest = SequenceManifest {
        format_version: MANIFEST_VERSION,
        sensor: "sensor.toml".into(),
        mapping: "mapping.toml".into(),
        poses: "poses.txt".into(),
        calib: Some("calib.txt".into()),
        frames: records,
    };
    let path = dir.join("manifest.toml");
    manifest.save(&path)?;
    Ok(path)
}
