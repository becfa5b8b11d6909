//! Ray-cast lidar sequences of a ground plane with oriented boxes.
//!
//! One ray per pixel: row elevations come from the sensor table (or the
//! simple-bin centers), azimuths from the column centers. Boxes may move with
//! a constant velocity per frame. Points are returned in the sensor frame of
//! each pose.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::alignment::RigidTransform;
use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud, SensorConfig, SensorModel, SphericalCoords};

pub const SCENE_VERSION: u32 = 1;
/// Raw id of points without a semantic class.
pub const UNLABELED: u32 = 0;

fn one() -> f64 {
    1.0
}

fn version() -> u32 {
    SCENE_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundSpec {
    pub class: u32,
    pub remission: f64,
}

impl Default for GroundSpec {
    fn default() -> Self {
        Self {
            class: 1,
            remission: 0.2,
        }
    }
}

/// Ego trajectory: either explicit `(x, y, yaw)` per frame or a start pose
/// advanced by `speed` along the heading and `yaw_rate` per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EgoSpec {
    pub height: f64,
    pub start: [f64; 3],
    pub speed: f64,
    pub yaw_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub poses: Option<Vec<[f64; 3]>>,
}

impl Default for EgoSpec {
    fn default() -> Self {
        Self {
            height: 1.7,
            start: [0.0; 3],
            speed: 0.0,
            yaw_rate: 0.0,
            poses: None,
        }
    }
}

/// An oriented box resting wherever `center` puts it. `remission` is shown
/// on a frame with probability `remission_visible_prob`; otherwise the
/// scene's `default_remission` is returned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub center: [f64; 3],
    pub size: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
    pub class: u32,
    #[serde(default)]
    pub velocity: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remission: Option<f64>,
    #[serde(default = "one")]
    pub remission_visible_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    #[serde(default = "version")]
    pub format_version: u32,
    pub sensor: SensorConfig,
    pub frames: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default = "default_max_range")]
    pub max_range: f64,
    #[serde(default = "default_remission")]
    pub default_remission: f64,
    /// Ground plane `z = 0`; absent means no ground.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground: Option<GroundSpec>,
    #[serde(default)]
    pub ego: EgoSpec,
    #[serde(default)]
    pub boxes: Vec<BoxSpec>,
}

fn default_max_range() -> f64 {
    80.0
}

fn default_remission() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFrame {
    pub cloud: PointCloud,
    /// Raw class id per point.
    pub labels: Vec<u32>,
    pub pose: RigidTransform,
}

impl SyntheticSceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serialisable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != SCENE_VERSION {
            return Err(Error::config(format!(
                "scene format_version {} unsupported",
                self.format_version
            )));
        }
        SensorModel::from_config(&self.sensor)?;
        if self.frames == 0 {
            return Err(Error::config("scene needs at least one frame"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and non-negative"));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::config("max_range must be positive"));
        }
        if let Some(p) = &self.ego.poses {
            if p.len() != self.frames {
                return Err(Error::config(format!(
                    "trajectory has {} poses for {} frames",
                    p.len(),
                    self.frames
                )));
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if b.velocity.iter().chain(&b.center).any(|v| !v.is_finite()) {
                return Err(Error::config(format!(
                    "box {i}: non-finite center or velocity"
                )));
            }
            if b.size.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::config(format!("box {i}: sizes must be positive")));
            }
            if !(0.0..=1.0).contains(&b.remission_visible_prob) {
                return Err(Error::config(format!(
                    "box {i}: probability outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Sensor pose of frame `t` in the world.
    pub fn ego_pose(&self, t: usize) -> RigidTransform {
        let e = &self.ego;
        let [x, y, yaw] = match &e.poses {
            Some(p) => p[t],
            None => {
                // Integrate heading changes so curved trajectories stay smooth.
                let [mut x, mut y, mut yaw] = e.start;
                for _ in 0..t {
                    x += e.speed * yaw.cos();
                    y += e.speed * yaw.sin();
                    yaw += e.yaw_rate;
                }
                [x, y, yaw]
            }
        };
        RigidTransform::from_yaw_translation(yaw, x, y, e.height)
    }
}

/// Entry and exit distances of a ray through a box, in its local frame.
fn ray_box(o: [f64; 3], d: [f64; 3], half: [f64; 3]) -> Option<f64> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let a = (-half[k] - o[k]) / d[k];
        let b = (half[k] - o[k]) / d[k];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t1 >= t0.max(0.0)).then_some(if t0 > 0.0 { t0 } else { t1 })
}

struct PlacedBox {
    center: [f64; 3],
    cos: f64,
    sin: f64,
    half: [f64; 3],
}

impl PlacedBox {
    fn hit(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        let rel = [
            o[0] - self.center[0],
            o[1] - self.center[1],
            o[2] - self.center[2],
        ];
        // Rotate by -yaw into the box frame.
        let lo = [
            self.cos * rel[0] + self.sin * rel[1],
            -self.sin * rel[0] + self.cos * rel[1],
            rel[2],
        ];
        let ld = [
            self.cos * d[0] + self.sin * d[1],
            -self.sin * d[0] + self.cos * d[1],
            d[2],
        ];
        ray_box(lo, ld, self.half)
    }
}

/// Renders every frame of `spec`. Deterministic for a given seed.
pub fn generate_synthetic(spec: &SyntheticSceneSpec, seed: u64) -> Result<Vec<SyntheticFrame>> {
    spec.validate()?;
    let m = SensorModel::from_config(&spec.sensor)?;
    let rows = m.row_angles();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise =
        (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("validated"));
    // Unit ray directions in the sensor frame, row-major.
    let dirs: Vec<[f64; 3]> = rows
        .iter()
        .flat_map(|&theta| (0..m.w()).map(move |v| (theta, v)))
        .map(|(theta, v)| {
            SphericalCoords {
                theta,
                phi: m.column_azimuth(v),
                r: 1.0,
            }
            .to_cartesian()
        })
        .collect();

    let mut frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let pose = spec.ego_pose(t);
        let boxes: Vec<PlacedBox> = spec
            .boxes
            .iter()
            .map(|b| PlacedBox {
                center: std::array::from_fn(|k| b.center[k] + b.velocity[k] * t as f64),
                cos: b.yaw.cos(),
                sin: b.yaw.sin(),
                half: b.size.map(|s| 0.5 * s),
            })
            .collect();
        let remissions: Vec<f64> = spec
            .boxes
            .iter()
            .map(|b| {
                let shown = rng.random::<f64>() < b.remission_visible_prob;
                match b.remission {
                    Some(r) if shown => r,
                    _ => spec.default_remission,
                }
            })
            .collect();
        let origin = pose.translation_part();
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for d in &dirs {
            let dw = rotate(&pose, *d);
            let mut best: Option<(f64, u32, f64)> = None;
            if let Some(g) = &spec.ground {
                if dw[2] < 0.0 && origin[2] > 0.0 {
                    best = Some((-origin[2] / dw[2], g.class, g.remission));
                }
            }
            for (i, b) in boxes.iter().enumerate() {
                if let Some(s) = b.hit(origin, dw) {
                    if best.is_none_or(|(r, _, _)| s < r) {
                        best = Some((s, spec.boxes[i].class, remissions[i]));
                    }
                }
            }
            let Some((mut r, class, remission)) = best.filter(|(r, _, _)| *r <= spec.max_range)
            else {
                continue;
            };
            if let Some(n) = &noise {
                r = (r + n.sample(&mut rng)).max(1e-3);
            }
            points.push(Point::new(
                r * d[0],
                r * d[1],
                r * d[2],
                remission.clamp(0.0, 1.0),
            ));
            labels.push(class);
        }
        frames.push(SyntheticFrame {
            cloud: PointCloud::new(points)?,
            labels,
            pose,
        });
    }
    Ok(frames)
}

fn rotate(t: &RigidTransform, d: [f64; 3]) -> [f64; 3] {
    let m = t.matrix();
    std::array::from_fn(|i| m[i][0] * d[0] + m[i][1] * d[1] + m[i][2] * d[2])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(frames: usize) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            format_version: SCENE_VERSION,
            sensor: SensorModel::uniform(8, 32, 5.0, -45.0).unwrap().to_config(),
            frames,
            noise_sigma: 0.0,
            max_range: 80.0,
            default_remission: 0.5,
            ground: Some(GroundSpec::default()),
            ego: EgoSpec {
                height: 1.0,
                ..EgoSpec::default()
            },
            boxes: vec![],
        }
    }

    #[test]
    fn downward_ray_hits_ground_at_sqrt2() {
        let mut s = spec(1);
        s.sensor = SensorConfig {
            h: 1,
            w: 2,
            fov_up_deg: -40.0,
            fov_down_deg: -50.0,
            row_elevations_deg: Some(vec![-45.0]),
        };
        let f = &generate_synthetic(&s, 0).unwrap()[0];
        // Column 1 of 2 looks along phi = 0 (+x).
        let i = f.cloud.iter().position(|p| p.x > 0.0).unwrap();
        assert!((f.cloud.points()[i].range() - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(f.labels[i], 1);
    }

    #[test]
    fn static_scene_frames_are_identical() {
        let mut s = spec(3);
        s.boxes.push(BoxSpec {
            center: [6.0, 1.0, 0.75],
            size: [4.0, 2.0, 1.5],
            yaw: 0.3,
            class: 2,
            velocity: [0.0; 3],
            remission: None,
            remission_visible_prob: 1.0,
        });
        let f = generate_synthetic(&s, 5).unwrap();
        assert_eq!(f[0], f[1]);
        assert_eq!(f[1], f[2]);
        assert!(f[0].labels.contains(&2));
        assert_eq!(generate_synthetic(&s, 5).unwrap(), f);
    }

    #[test]
    fn moving_box_advances_one_metre_per_frame() {
        let mut s = spec(3);
        s.ground = None;
        s.sensor = SensorModel::uniform(4, 64, 10.0, -10.0)
            .unwrap()
            .to_config();
        s.ego.height = 0.5;
        s.boxes.push(BoxSpec {
            center: [8.0, 0.0, 0.5],
            size: [1.0, 2.0, 1.0],
            yaw: 0.0,
            class: 3,
            velocity: [1.0, 0.0, 0.0],
            remission: Some(0.9),
            remission_visible_prob: 1.0,
        });
        let f = generate_synthetic(&s, 1).unwrap();
        for (t, fr) in f.iter().enumerate() {
            assert!(fr.labels.iter().all(|l| *l == 3));
            assert!(fr.cloud.iter().all(|p| p.remission == 0.9));
            // Every hit lies on the face looking at the sensor.
            for p in fr.cloud.iter() {
                assert!((p.x - (7.5 + t as f64)).abs() < 1e-9, "{}", p.x);
            }
        }
    }

    #[test]
    fn validation_errors() {
        let mut s = spec(2);
        s.ego.poses = Some(vec![[0.0; 3]]);
        assert!(matches!(generate_synthetic(&s, 0), Err(Error::Config(_))));
        let mut s = spec(1);
        s.sensor.w = 0;
        assert!(matches!(generate_synthetic(&s, 0), Err(Error::Config(_))));
    }

    #[test]
    fn spec_toml_roundtrip() {
        let s = spec(4);
        assert_eq!(SyntheticSceneSpec::from_toml(&s.to_toml()).unwrap(), s);
    }

    #[test]
    fn noise_is_seeded() {
        let mut s = spec(1);
        s.noise_sigma = 0.05;
        let a = generate_synthetic(&s, 3).unwrap();
        assert_eq!(a, generate_synthetic(&s, 3).unwrap());
        assert_ne!(a, generate_synthetic(&s, 4).unwrap());
    }
}
