//! Temporal memory alignment.
//!
//! The previous frame's retained points are moved into the current sensor
//! frame with the relative ego motion, re-projected, and the memory feature
//! vectors are scattered to the new pixels. Pixels that receive nothing are
//! zero. When several sources land on one pixel the nearest (smallest
//! transformed range) wins. Features are copied, never blended.
//!
//! Warp maps can be exported as a little-endian table:
//!
//! ```text
//! magic   b"TMAW"
//! version u32 = 1
//! h, w    u32, u32
//! count   u32          number of entries
//! dropped u32          sources that landed on the sensor origin
//! count x { u u32, v u32, u_t i32, v_t i32, range f64 }
//! ```
//!
//! `u_t = v_t = -1` marks an entry outside the field of view.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{
    cartesian_to_spherical, Point, PointCloud, ProjectionMode, RangeImage, SensorModel,
};

const ORTHO_TOL: f64 = 1e-9;

/// Homogeneous 4x4 rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    m: [[f64; 4]; 4],
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self { m }
    }

    /// Validates orthonormality and `det(R) = +1` to 1e-9.
    pub fn from_matrix(m: [[f64; 4]; 4]) -> Result<Self> {
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidPose("bottom row must be [0, 0, 0, 1]".into()));
        }
        if m.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidPose("non-finite matrix entry".into()));
        }
        let t = Self { m };
        let err = t.orthonormality_error();
        if err > ORTHO_TOL {
            return Err(Error::InvalidPose(format!(
                "rotation not orthonormal (error {err:.3e})"
            )));
        }
        let det = t.rotation_det();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidPose(format!("rotation determinant {det}")));
        }
        Ok(t)
    }

    /// Like [`from_matrix`](Self::from_matrix) but first re-orthonormalizes
    /// rotations that are off by at most `tol` (text pose files carry ~1e-7
    /// rounding).
    pub fn from_matrix_normalized(m: [[f64; 4]; 4], tol: f64) -> Result<Self> {
        let raw = Self { m };
        if raw.orthonormality_error() > tol || (raw.rotation_det() - 1.0).abs() > tol {
            return Err(Error::InvalidPose(format!(
                "rotation too far from orthonormal (error {:.3e})",
                raw.orthonormality_error()
            )));
        }
        // Gram-Schmidt on the rows, third row from the cross product.
        let r0 = normalize([m[0][0], m[0][1], m[0][2]]);
        let r1raw = [m[1][0], m[1][1], m[1][2]];
        let d = dot(r0, r1raw);
        let r1 = normalize([
            r1raw[0] - d * r0[0],
            r1raw[1] - d * r0[1],
            r1raw[2] - d * r0[2],
        ]);
        let r2 = cross(r0, r1);
        let mut out = m;
        for (i, r) in [r0, r1, r2].into_iter().enumerate() {
            out[i][..3].copy_from_slice(&r);
        }
        out[3] = [0.0, 0.0, 0.0, 1.0];
        Self::from_matrix(out)
    }

    /// From a row-major 3x4 `[R | t]`.
    pub fn from_row_major_3x4(v: &[f64; 12]) -> Result<Self> {
        Self::from_matrix(Self::expand_3x4(v))
    }

    pub(crate) fn expand_3x4(v: &[f64; 12]) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            m[r].copy_from_slice(&v[4 * r..4 * r + 4]);
        }
        m[3] = [0.0, 0.0, 0.0, 1.0];
        m
    }

    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        std::array::from_fn(|i| self.m[i / 4][i % 4])
    }

    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        let mut t = Self::identity();
        t.m[0][3] = x;
        t.m[1][3] = y;
        t.m[2][3] = z;
        t
    }

    /// Rotation about +z by `yaw` radians followed by a translation.
    pub fn from_yaw_translation(yaw: f64, x: f64, y: f64, z: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            m: [
                [c, -s, 0.0, x],
                [s, c, 0.0, y],
                [0.0, 0.0, 1.0, z],
                [0.0, 0.0, 0.0, 1.0],
            ],
        }
    }

    /// Rotation from roll/pitch/yaw (applied x, then y, then z) plus translation.
    pub fn from_euler_translation(roll: f64, pitch: f64, yaw: f64, t: [f64; 3]) -> Self {
        let (sr, cr) = roll.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let (sy, cy) = yaw.sin_cos();
        Self {
            m: [
                [
                    cy * cp,
                    cy * sp * sr - sy * cr,
                    cy * sp * cr + sy * sr,
                    t[0],
                ],
                [
                    sy * cp,
                    sy * sp * sr + cy * cr,
                    sy * sp * cr - cy * sr,
                    t[1],
                ],
                [-sp, cp * sr, cp * cr, t[2]],
                [0.0, 0.0, 0.0, 1.0],
            ],
        }
    }

    pub fn matrix(&self) -> &[[f64; 4]; 4] {
        &self.m
    }

    pub fn translation_part(&self) -> [f64; 3] {
        [self.m[0][3], self.m[1][3], self.m[2][3]]
    }

    pub fn compose(&self, rhs: &RigidTransform) -> RigidTransform {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, out) in row.iter_mut().enumerate() {
                *out = (0..4).map(|k| self.m[i][k] * rhs.m[k][j]).sum();
            }
        }
        RigidTransform { m }
    }

    pub fn inverse(&self) -> RigidTransform {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = self.m[j][i];
            }
            m[i][3] = -(0..3).map(|k| self.m[k][i] * self.m[k][3]).sum::<f64>();
        }
        m[3][3] = 1.0;
        RigidTransform { m }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| {
            self.m[i][0] * p[0] + self.m[i][1] * p[1] + self.m[i][2] * p[2] + self.m[i][3]
        })
    }

    /// Max abs entry of `R R^T - I`.
    pub fn orthonormality_error(&self) -> f64 {
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| self.m[i][k] * self.m[j][k]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((d - target).abs());
            }
        }
        err
    }

    fn rotation_det(&self) -> f64 {
        let r = |i: usize| [self.m[i][0], self.m[i][1], self.m[i][2]];
        dot(r(0), cross(r(1), r(2)))
    }

    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        self.m
            .iter()
            .flatten()
            .zip(other.m.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Motion that takes points recorded at `prev` into the sensor frame at `curr`:
/// `curr^-1 * prev`.
pub fn relative_transform(prev: &RigidTransform, curr: &RigidTransform) -> Result<RigidTransform> {
    let rel = curr.inverse().compose(prev);
    let err = rel.orthonormality_error();
    if err > ORTHO_TOL {
        return Err(Error::InvalidPose(format!(
            "relative transform lost orthonormality (error {err:.3e})"
        )));
    }
    Ok(rel)
}

/// Moves every point through `rel`; remission is kept. Points may land on the
/// origin, so the result is a raw list rather than a validated cloud.
pub fn transform_points(pc: &PointCloud, rel: &RigidTransform) -> Vec<Point> {
    pc.iter()
        .map(|p| {
            let [x, y, z] = rel.apply(p.xyz());
            Point::new(x, y, z, p.remission)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpEntry {
    pub src: (usize, usize),
    /// `None` when the re-projected elevation left the field of view.
    pub target: Option<(usize, usize)>,
    pub range: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpMap {
    h: usize,
    w: usize,
    entries: Vec<WarpEntry>,
    dropped: usize,
}

impl WarpMap {
    pub fn identity(ri: &RangeImage) -> Self {
        let entries = ri
            .pixel_to_point()
            .iter()
            .enumerate()
            .filter(|(_, p)| p.is_some())
            .map(|(idx, _)| {
                let uv = (idx / ri.w(), idx % ri.w());
                WarpEntry {
                    src: uv,
                    target: Some(uv),
                    range: ri.get(crate::geometry::CH_RANGE, uv.0, uv.1),
                }
            })
            .collect();
        Self {
            h: ri.h(),
            w: ri.w(),
            entries,
            dropped: 0,
        }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn entries(&self) -> &[WarpEntry] {
        &self.entries
    }

    /// Sources dropped because they landed on the sensor origin.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    /// For every target pixel (row-major), the winning source pixel index.
    pub fn gather_index(&self) -> Vec<Option<usize>> {
        let mut best: Vec<Option<(usize, f64)>> = vec![None; self.h * self.w];
        for e in &self.entries {
            let Some((u, v)) = e.target else { continue };
            let slot = &mut best[u * self.w + v];
            let src = e.src.0 * self.w + e.src.1;
            match slot {
                Some((_, r)) if *r <= e.range => {}
                _ => *slot = Some((src, e.range)),
            }
        }
        best.into_iter().map(|b| b.map(|(s, _)| s)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.entries.len() * 24);
        out.extend_from_slice(b"TMAW");
        for x in [
            1,
            self.h as u32,
            self.w as u32,
            self.entries.len() as u32,
            self.dropped as u32,
        ] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for e in &self.entries {
            out.extend_from_slice(&(e.src.0 as u32).to_le_bytes());
            out.extend_from_slice(&(e.src.1 as u32).to_le_bytes());
            let (tu, tv) = e
                .target
                .map_or((-1i32, -1i32), |(u, v)| (u as i32, v as i32));
            out.extend_from_slice(&tu.to_le_bytes());
            out.extend_from_slice(&tv.to_le_bytes());
            out.extend_from_slice(&e.range.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::format("<warp map>", msg);
        if bytes.len() < 24 || &bytes[..4] != b"TMAW" {
            return Err(bad("missing TMAW header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        if u32_at(4) != 1 {
            return Err(bad("unsupported warp map version"));
        }
        let (h, w, count, dropped) = (
            u32_at(8) as usize,
            u32_at(12) as usize,
            u32_at(16) as usize,
            u32_at(20) as usize,
        );
        if bytes.len() != 24 + count * 24 {
            return Err(bad("entry table length does not match header"));
        }
        let mut entries = Vec::with_capacity(count);
        for k in 0..count {
            let o = 24 + k * 24;
            let tu = u32_at(o + 8) as i32;
            let tv = u32_at(o + 12) as i32;
            let target = if tu < 0 || tv < 0 {
                None
            } else {
                Some((tu as usize, tv as usize))
            };
            entries.push(WarpEntry {
                src: (u32_at(o) as usize, u32_at(o + 4) as usize),
                target,
                range: f64::from_le_bytes(bytes[o + 16..o + 24].try_into().unwrap()),
            });
        }
        Ok(Self {
            h,
            w,
            entries,
            dropped,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Re-projects the retained point of every occupied pixel of `ri_prev` into the
/// current frame. Uses the same projection mode as the current frame; elevations
/// outside the field of view are marked rather than clamped.
pub fn compute_warp_map(
    cloud_prev: &PointCloud,
    ri_prev: &RangeImage,
    rel: &RigidTransform,
    m: &SensorModel,
    mode: ProjectionMode,
) -> Result<WarpMap> {
    if ri_prev.h() != m.h() || ri_prev.w() != m.w() {
        return Err(Error::shape(format!(
            "range image {}x{} does not match sensor {}x{}",
            ri_prev.h(),
            ri_prev.w(),
            m.h(),
            m.w()
        )));
    }
    if ri_prev.n_points() != cloud_prev.len() {
        return Err(Error::shape("range image was not built from this cloud"));
    }
    let mut entries = Vec::new();
    let mut dropped = 0;
    for (idx, slot) in ri_prev.pixel_to_point().iter().enumerate() {
        let Some(i) = *slot else { continue };
        let p = rel.apply(cloud_prev.points()[i].xyz());
        let Ok(s) = cartesian_to_spherical(p) else {
            dropped += 1;
            continue;
        };
        let target = m.row_in_fov(s.theta, mode)?.map(|u| (u, m.column(s.phi)));
        entries.push(WarpEntry {
            src: (idx / m.w(), idx % m.w()),
            target,
            range: s.r,
        });
    }
    Ok(WarpMap {
        h: m.h(),
        w: m.w(),
        entries,
        dropped,
    })
}

/// A `c x h x w` recurrent feature map with a per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalMemory {
    c: usize,
    h: usize,
    w: usize,
    features: Vec<f64>,
    valid: Vec<bool>,
}

impl TemporalMemory {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            features: vec![0.0; c * h * w],
            valid: vec![false; h * w],
        }
    }

    /// Pixels whose feature vector is not all-zero are marked valid.
    pub fn from_features(c: usize, h: usize, w: usize, features: Vec<f64>) -> Result<Self> {
        if features.len() != c * h * w {
            return Err(Error::shape(format!(
                "memory buffer has {} values, expected {}",
                features.len(),
                c * h * w
            )));
        }
        let valid = (0..h * w)
            .map(|p| (0..c).any(|k| features[k * h * w + p] != 0.0))
            .collect();
        Ok(Self {
            c,
            h,
            w,
            features,
            valid,
        })
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn feature_vector(&self, u: usize, v: usize) -> Vec<f64> {
        let hw = self.h * self.w;
        (0..self.c)
            .map(|k| self.features[k * hw + u * self.w + v])
            .collect()
    }
}

pub fn warp_memory(prev: &TemporalMemory, wm: &WarpMap) -> Result<TemporalMemory> {
    if prev.h != wm.h || prev.w != wm.w {
        return Err(Error::shape(format!(
            "memory {}x{} does not match warp map {}x{}",
            prev.h, prev.w, wm.h, wm.w
        )));
    }
    let hw = prev.h * prev.w;
    let mut out = TemporalMemory::zeros(prev.c, prev.h, prev.w);
    for (dst, src) in wm.gather_index().into_iter().enumerate() {
        let Some(src) = src else { continue };
        for k in 0..prev.c {
            out.features[k * hw + dst] = prev.features[k * hw + src];
        }
        out.valid[dst] = true;
    }
    Ok(out)
}

/// Full alignment of `H_{t-1}` into frame `t`.
#[allow(clippy::too_many_arguments)]
pub fn align(
    prev: &TemporalMemory,
    cloud_prev: &PointCloud,
    ri_prev: &RangeImage,
    pose_prev: &RigidTransform,
    pose_curr: &RigidTransform,
    m: &SensorModel,
    mode: ProjectionMode,
) -> Result<TemporalMemory> {
    let rel = relative_transform(pose_prev, pose_curr)?;
    let wm = compute_warp_map(cloud_prev, ri_prev, &rel, m, mode)?;
    warp_memory(prev, &wm)
}
