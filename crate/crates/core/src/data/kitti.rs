//! SemanticKITTI-style files: packed scans, packed labels, text poses and
//! calibration.

use std::path::Path;

use crate::alignment::RigidTransform;
use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

use super::mapping::ClassMapping;

/// Rotations read from text are re-orthonormalised if within this distance.
const POSE_TOL: f64 = 1e-4;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Decodes `(x, y, z, remission)` little-endian `f32` quadruples.
pub fn parse_scan(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let tail = bytes.len() % 16;
    if tail != 0 {
        return Err(Error::format(
            path,
            format!(
                "truncated point record at byte offset {} ({tail} of 16 bytes)",
                bytes.len() - tail
            ),
        ));
    }
    let points = bytes
        .chunks_exact(16)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().unwrap()) as f64;
            Point::new(f(0), f(1), f(2), f(3).clamp(0.0, 1.0))
        })
        .collect();
    PointCloud::new(points)
}

pub fn read_scan(path: &Path) -> Result<PointCloud> {
    parse_scan(&read(path)?, path)
}

pub fn encode_scan(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(pc.len() * 16);
    for p in pc.iter() {
        for v in [p.x, p.y, p.z, p.remission] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_scan(path: &Path, pc: &PointCloud) -> Result<()> {
    write(path, &encode_scan(pc))
}

pub fn parse_raw_labels(bytes: &[u8], path: &Path) -> Result<Vec<u32>> {
    let tail = bytes.len() % 4;
    if tail != 0 {
        return Err(Error::format(
            path,
            format!("truncated label at byte offset {}", bytes.len() - tail),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Raw `u32` labels including instance bits.
pub fn read_raw_labels(path: &Path) -> Result<Vec<u32>> {
    parse_raw_labels(&read(path)?, path)
}

/// Per-point training ids.
pub fn read_labels(path: &Path, mapping: &ClassMapping) -> Result<Vec<u32>> {
    read_raw_labels(path)?
        .into_iter()
        .map(|raw| mapping.map(raw))
        .collect::<Result<_>>()
        .map_err(|e| match e {
            Error::Label(msg) => Error::Label(format!("{}: {msg}", path.display())),
            other => other,
        })
}

pub fn write_labels(path: &Path, labels: &[u32]) -> Result<()> {
    let bytes: Vec<u8> = labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    write(path, &bytes)
}

fn parse_reals(line: &str, path: &Path, lineno: usize) -> Result<[f64; 12]> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format(path, format!("line {lineno}: {e}")))?;
    vals.try_into().map_err(|v: Vec<f64>| {
        Error::format(
            path,
            format!("line {lineno}: expected 12 values, found {}", v.len()),
        )
    })
}

fn to_transform(v: &[f64; 12], path: &Path, lineno: usize) -> Result<RigidTransform> {
    RigidTransform::from_matrix_normalized(RigidTransform::expand_3x4(v), POSE_TOL)
        .map_err(|e| Error::format(path, format!("line {lineno}: {e}")))
}

/// One row-major 3x4 pose per non-empty line.
pub fn parse_poses(text: &str, path: &Path) -> Result<Vec<RigidTransform>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| to_transform(&parse_reals(l, path, i + 1)?, path, i + 1))
        .collect()
}

/// The `Tr:` entry of a calibration file (camera from lidar).
pub fn parse_calib(text: &str, path: &Path) -> Result<RigidTransform> {
    for (i, line) in text.lines().enumerate() {
        if let Some(rest) = line.trim().strip_prefix("Tr:") {
            return to_transform(&parse_reals(rest, path, i + 1)?, path, i + 1);
        }
    }
    Err(Error::format(path, "no 'Tr:' line"))
}

/// Camera-frame poses converted to the sensor frame, `Tr^-1 * T_cam * Tr`.
/// Without a calibration file the poses are taken as sensor poses.
pub fn read_poses(poses: &Path, calib: Option<&Path>) -> Result<Vec<RigidTransform>> {
    let text = std::fs::read_to_string(poses).map_err(|e| Error::io(poses, e))?;
    let cam = parse_poses(&text, poses)?;
    let Some(calib) = calib else {
        return Ok(cam);
    };
    let ctext = std::fs::read_to_string(calib).map_err(|e| Error::io(calib, e))?;
    let tr = parse_calib(&ctext, calib)?;
    Ok(camera_to_sensor(&cam, &tr))
}

pub fn camera_to_sensor(cam: &[RigidTransform], tr: &RigidTransform) -> Vec<RigidTransform> {
    let inv = tr.inverse();
    cam.iter().map(|t| inv.compose(t).compose(tr)).collect()
}

pub fn format_pose(t: &RigidTransform) -> String {
    t.to_row_major_3x4()
        .iter()
        .map(|v| format!("{v:e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn write_poses(path: &Path, poses: &[RigidTransform]) -> Result<()> {
    let mut text = String::new();
    for p in poses {
        text.push_str(&format_pose(p));
        text.push('\n');
    }
    write(path, text.as_bytes())
}

pub fn write_calib(path: &Path, tr: &RigidTransform) -> Result<()> {
    write(path, format!("Tr: {}\n", format_pose(tr)).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn scan_examples() {
        let mut b = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let pc = parse_scan(&b, p()).unwrap();
        assert_eq!(pc.len(), 1);
        assert_eq!(pc.points()[0], Point::new(1.0, 2.0, 3.0, 0.5));
        assert!(parse_scan(&[], p()).unwrap().is_empty());
        let err = parse_scan(&b[..13], p()).unwrap_err();
        assert!(err.to_string().contains("byte offset 0"), "{err}");
    }

    #[test]
    fn remission_is_clamped() {
        let mut b = Vec::new();
        for v in [1.0f32, 0.0, 0.0, 7.0] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(parse_scan(&b, p()).unwrap().points()[0].remission, 1.0);
    }

    #[test]
    fn pose_examples() {
        let t = parse_poses("1 0 0 0 0 1 0 0 0 0 1 0\n\n1 0 0 2 0 1 0 3 0 0 1 4\n", p()).unwrap();
        assert_eq!(t[0], RigidTransform::identity());
        assert_eq!(t[1], RigidTransform::translation(2.0, 3.0, 4.0));
        let err = parse_poses("1 0 0 0\n", p()).unwrap_err();
        assert!(err.to_string().contains("line 1"));
        let err = parse_poses("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 x 0 1 0 0 0 0 1 0", p()).unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn calibration_conjugates_poses() {
        let tr = RigidTransform::from_euler_translation(-1.5, 0.01, -1.55, [0.1, -0.05, -0.3]);
        let cam = RigidTransform::from_euler_translation(0.02, 0.3, -0.1, [5.0, 1.0, -2.0]);
        let s = camera_to_sensor(&[cam], &tr)[0];
        let lhs = s.compose(&tr.inverse());
        let rhs = tr.inverse().compose(&cam);
        assert!(lhs.max_abs_diff(&rhs) < 1e-10);
        assert_eq!(
            parse_calib("P0: 1 2 3\nTr: 1 0 0 0 0 1 0 0 0 0 1 0\n", p()).unwrap(),
            RigidTransform::identity()
        );
    }
}
