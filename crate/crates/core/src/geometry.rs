//! Point clouds, sensor intrinsics and spherical range-image projection.
//!
//! Rows index elevation (row 0 is the highest laser). Columns index azimuth
//! with `phi = -atan2(y, x)`: column `w / 2` looks along +x, column `3w / 4`
//! along +y. The image wraps horizontally.

use std::f64::consts::PI;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel order of a [`RangeImage`].
pub const CHANNELS: usize = 6;
pub const CH_RANGE: usize = 0;
pub const CH_X: usize = 1;
pub const CH_Y: usize = 2;
pub const CH_Z: usize = 3;
pub const CH_REMISSION: usize = 4;
pub const CH_OCCUPANCY: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub remission: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, remission: f64) -> Self {
        Self { x, y, z, remission }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn range(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

/// A validated lidar sweep: finite coordinates, no zero-range returns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.remission.is_finite()) {
                return Err(Error::InvalidPoint(format!(
                    "point {i} has non-finite fields"
                )));
            }
            if p.x == 0.0 && p.y == 0.0 && p.z == 0.0 {
                return Err(Error::InvalidPoint(format!("point {i} has zero range")));
            }
        }
        Ok(Self { points })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point> {
        self.points.iter()
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalCoords {
    /// Elevation, radians.
    pub theta: f64,
    /// Azimuth, radians in (-pi, pi].
    pub phi: f64,
    pub r: f64,
}

impl SphericalCoords {
    pub fn to_cartesian(&self) -> [f64; 3] {
        let c = self.theta.cos();
        [
            self.r * c * self.phi.cos(),
            -self.r * c * self.phi.sin(),
            self.r * self.theta.sin(),
        ]
    }
}

pub fn cartesian_to_spherical(p: [f64; 3]) -> Result<SphericalCoords> {
    let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    if !(r > 0.0) {
        return Err(Error::DegeneratePoint);
    }
    let theta = (p[2] / r).clamp(-1.0, 1.0).asin();
    let mut phi = -p[1].atan2(p[0]);
    // -atan2 yields [-pi, pi); fold -pi onto +pi.
    if phi <= -PI {
        phi = PI;
    }
    Ok(SphericalCoords { theta, phi, r })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMode {
    #[default]
    Simple,
    Adaptive,
}

impl FromStr for ProjectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(Self::Simple),
            "adaptive" => Ok(Self::Adaptive),
            other => Err(Error::config(format!("unknown projection mode '{other}'"))),
        }
    }
}

/// Lidar intrinsics. Angles in radians.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorModel {
    h: usize,
    w: usize,
    fov_up: f64,
    fov_down: f64,
    row_elevations: Option<Vec<f64>>,
}

/// Text form of a [`SensorModel`], angles in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub h: usize,
    pub w: usize,
    pub fov_up_deg: f64,
    pub fov_down_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_elevations_deg: Option<Vec<f64>>,
}

impl SensorModel {
    pub fn new(
        h: usize,
        w: usize,
        fov_up: f64,
        fov_down: f64,
        row_elevations: Option<Vec<f64>>,
    ) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::config("sensor image size must be positive"));
        }
        if !(fov_up - fov_down > 0.0) || !fov_up.is_finite() || !fov_down.is_finite() {
            return Err(Error::config(
                "field of view f = f_up - f_down must be positive",
            ));
        }
        if let Some(rows) = &row_elevations {
            if rows.len() != h {
                return Err(Error::config(format!(
                    "row elevation table has {} entries, expected {h}",
                    rows.len()
                )));
            }
            if rows.windows(2).any(|p| !(p[0] > p[1])) || rows.iter().any(|t| !t.is_finite()) {
                return Err(Error::config(
                    "row elevations must be finite and strictly decreasing",
                ));
            }
        }
        Ok(Self {
            h,
            w,
            fov_up,
            fov_down,
            row_elevations,
        })
    }

    pub fn from_degrees(
        h: usize,
        w: usize,
        fov_up_deg: f64,
        fov_down_deg: f64,
        row_elevations_deg: Option<Vec<f64>>,
    ) -> Result<Self> {
        Self::new(
            h,
            w,
            fov_up_deg.to_radians(),
            fov_down_deg.to_radians(),
            row_elevations_deg.map(|r| r.into_iter().map(f64::to_radians).collect()),
        )
    }

    /// Uniform sensor whose row table sits at the centers of the simple-projection bins.
    pub fn uniform(h: usize, w: usize, fov_up_deg: f64, fov_down_deg: f64) -> Result<Self> {
        let f = fov_up_deg - fov_down_deg;
        let rows = (0..h)
            .map(|l| fov_up_deg - (l as f64 + 0.5) * f / h as f64)
            .collect();
        Self::from_degrees(h, w, fov_up_deg, fov_down_deg, Some(rows))
    }

    /// A 64-laser head with a dense band around the horizon and sparse outer rows,
    /// in the spirit of the Pandar64: 8 rows at 1.5 deg spacing above, 48 rows at
    /// 0.1667 deg spacing, 8 rows at 2 deg spacing below.
    pub fn nonuniform_64(w: usize) -> Result<Self> {
        let mut rows = Vec::with_capacity(64);
        let mut t = 14.0;
        for _ in 0..8 {
            rows.push(t);
            t -= 1.5;
        }
        for _ in 0..48 {
            rows.push(t);
            t -= 1.0 / 6.0;
        }
        t -= 2.0;
        for _ in 0..8 {
            rows.push(t);
            t -= 2.0;
        }
        Self::from_degrees(64, w, 15.0, -25.0, Some(rows))
    }

    pub fn from_config(cfg: &SensorConfig) -> Result<Self> {
        Self::from_degrees(
            cfg.h,
            cfg.w,
            cfg.fov_up_deg,
            cfg.fov_down_deg,
            cfg.row_elevations_deg.clone(),
        )
    }

    pub fn to_config(&self) -> SensorConfig {
        SensorConfig {
            h: self.h,
            w: self.w,
            fov_up_deg: self.fov_up.to_degrees(),
            fov_down_deg: self.fov_down.to_degrees(),
            row_elevations_deg: self
                .row_elevations
                .as_ref()
                .map(|r| r.iter().map(|t| t.to_degrees()).collect()),
        }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn fov_up(&self) -> f64 {
        self.fov_up
    }

    pub fn fov_down(&self) -> f64 {
        self.fov_down
    }

    pub fn fov(&self) -> f64 {
        self.fov_up - self.fov_down
    }

    pub fn row_elevations(&self) -> Option<&[f64]> {
        self.row_elevations.as_deref()
    }

    /// Elevation of every row: the table when present, else simple-bin centers.
    pub fn row_angles(&self) -> Vec<f64> {
        match &self.row_elevations {
            Some(r) => r.clone(),
            None => (0..self.h)
                .map(|l| self.fov_up - (l as f64 + 0.5) * self.fov() / self.h as f64)
                .collect(),
        }
    }

    /// Azimuth at the center of column `v`.
    pub fn column_azimuth(&self, v: usize) -> f64 {
        PI * (1.0 - 2.0 * (v as f64 + 0.5) / self.w as f64)
    }

    pub fn column(&self, phi: f64) -> usize {
        let raw = (0.5 * (1.0 - phi / PI) * self.w as f64).floor() as i64;
        raw.rem_euclid(self.w as i64) as usize
    }

    /// Unclamped simple row index; may fall outside `[0, h)`.
    pub fn raw_simple_row(&self, theta: f64) -> i64 {
        ((1.0 - (theta - self.fov_down) / self.fov()) * self.h as f64).floor() as i64
    }

    /// Nearest row of the elevation table, ties toward the smaller index.
    pub fn nearest_row(&self, theta: f64) -> Result<usize> {
        let rows = self
            .row_elevations
            .as_deref()
            .ok_or_else(|| Error::config("adaptive projection requires a row elevation table"))?;
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (l, t) in rows.iter().enumerate() {
            let d = (t - theta).abs();
            if d < best_d {
                best_d = d;
                best = l;
            }
        }
        Ok(best)
    }

    /// Row for a re-projected elevation, or `None` if it falls outside the field
    /// of view. Simple mode: outside `[0, h)` before clamping. Adaptive mode:
    /// farther than 1.5 local inter-row gaps from the nearest row.
    pub fn row_in_fov(&self, theta: f64, mode: ProjectionMode) -> Result<Option<usize>> {
        match mode {
            ProjectionMode::Simple => {
                let raw = self.raw_simple_row(theta);
                Ok((0..self.h as i64).contains(&raw).then_some(raw as usize))
            }
            ProjectionMode::Adaptive => {
                let l = self.nearest_row(theta)?;
                let rows = self.row_elevations.as_deref().unwrap_or_default();
                let gap = if rows.len() == 1 {
                    self.fov()
                } else if theta >= rows[l] {
                    if l == 0 {
                        rows[0] - rows[1]
                    } else {
                        rows[l - 1] - rows[l]
                    }
                } else if l + 1 == rows.len() {
                    rows[l - 1] - rows[l]
                } else {
                    rows[l] - rows[l + 1]
                };
                Ok(((theta - rows[l]).abs() <= 1.5 * gap).then_some(l))
            }
        }
    }
}

/// A projected pixel. `clamped` marks an elevation that left the field of view
/// and was pulled back onto the first or last row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelCoord {
    pub u: usize,
    pub v: usize,
    pub clamped: bool,
}

pub fn project_simple(s: &SphericalCoords, m: &SensorModel) -> PixelCoord {
    let raw = m.raw_simple_row(s.theta);
    let u = raw.clamp(0, m.h as i64 - 1) as usize;
    PixelCoord {
        u,
        v: m.column(s.phi),
        clamped: raw != u as i64,
    }
}

pub fn project_adaptive(s: &SphericalCoords, m: &SensorModel) -> Result<PixelCoord> {
    Ok(PixelCoord {
        u: m.nearest_row(s.theta)?,
        v: m.column(s.phi),
        clamped: false,
    })
}

pub fn project(s: &SphericalCoords, m: &SensorModel, mode: ProjectionMode) -> Result<PixelCoord> {
    match mode {
        ProjectionMode::Simple => Ok(project_simple(s, m)),
        ProjectionMode::Adaptive => project_adaptive(s, m),
    }
}

/// A 6 x h x w range image with its point/pixel correspondences.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    h: usize,
    w: usize,
    channels: Vec<f64>,
    pixel_to_point: Vec<Option<usize>>,
    point_to_pixel: Vec<(usize, usize)>,
    clamped: Vec<bool>,
    collision_free_count: usize,
}

impl RangeImage {
    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn n_points(&self) -> usize {
        self.point_to_pixel.len()
    }

    /// Channel-major `6 * h * w` buffer.
    pub fn channels(&self) -> &[f64] {
        &self.channels
    }

    pub fn get(&self, channel: usize, u: usize, v: usize) -> f64 {
        self.channels[(channel * self.h + u) * self.w + v]
    }

    pub fn pixel_values(&self, u: usize, v: usize) -> [f64; CHANNELS] {
        std::array::from_fn(|c| self.get(c, u, v))
    }

    pub fn occupied(&self, u: usize, v: usize) -> bool {
        self.pixel_to_point[u * self.w + v].is_some()
    }

    pub fn pixel_to_point(&self) -> &[Option<usize>] {
        &self.pixel_to_point
    }

    pub fn point_at(&self, u: usize, v: usize) -> Option<usize> {
        self.pixel_to_point[u * self.w + v]
    }

    pub fn point_to_pixel(&self) -> &[(usize, usize)] {
        &self.point_to_pixel
    }

    pub fn clamped(&self) -> &[bool] {
        &self.clamped
    }

    pub fn collision_free_count(&self) -> usize {
        self.collision_free_count
    }

    pub fn occupied_count(&self) -> usize {
        self.pixel_to_point.iter().filter(|p| p.is_some()).count()
    }
}

pub fn build_range_image(
    pc: &PointCloud,
    m: &SensorModel,
    mode: ProjectionMode,
) -> Result<RangeImage> {
    let (h, w) = (m.h, m.w);
    let mut pixel_to_point: Vec<Option<usize>> = vec![None; h * w];
    let mut hits = vec![0u32; h * w];
    let mut point_to_pixel = Vec::with_capacity(pc.len());
    let mut clamped = Vec::with_capacity(pc.len());
    let mut ranges = Vec::with_capacity(pc.len());

    for (i, p) in pc.iter().enumerate() {
        let s = cartesian_to_spherical(p.xyz())?;
        let px = project(&s, m, mode)?;
        let idx = px.u * w + px.v;
        hits[idx] += 1;
        match pixel_to_point[idx] {
            Some(j) if ranges[j] <= s.r => {}
            _ => pixel_to_point[idx] = Some(i),
        }
        point_to_pixel.push((px.u, px.v));
        clamped.push(px.clamped);
        ranges.push(s.r);
    }

    let mut channels = vec![0.0; CHANNELS * h * w];
    for (idx, slot) in pixel_to_point.iter().enumerate() {
        if let Some(i) = *slot {
            let p = &pc.points()[i];
            let vals = [ranges[i], p.x, p.y, p.z, p.remission, 1.0];
            for (c, val) in vals.into_iter().enumerate() {
                channels[c * h * w + idx] = val;
            }
        }
    }
    let collision_free_count = point_to_pixel
        .iter()
        .filter(|(u, v)| hits[u * w + v] == 1)
        .count();

    Ok(RangeImage {
        h,
        w,
        channels,
        pixel_to_point,
        point_to_pixel,
        clamped,
        collision_free_count,
    })
}

pub fn collision_free_fraction(ri: &RangeImage) -> Result<f64> {
    if ri.n_points() == 0 {
        return Err(Error::UndefinedMetric(
            "collision-free fraction of an empty cloud",
        ));
    }
    Ok(ri.collision_free_count as f64 / ri.n_points() as f64)
}
