//! Sub-sequence augmentation and conversion of frames to network inputs.
//!
//! A flip and a crop window are drawn once per sub-sequence so consecutive
//! frames stay geometrically consistent. The flip mirrors the scene about the
//! sensor's x-z plane (points and poses), which mirrors image columns and
//! negates the y channel. The crop is a horizontal window with wraparound;
//! the warp between frames is computed at full resolution and cropped
//! afterwards.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{compute_warp_map, relative_transform, RigidTransform};
use crate::autodiff::Tensor;
use crate::data::{ClassMapping, Frame};
use crate::error::{Error, Result};
use crate::geometry::{
    build_range_image, Point, PointCloud, ProjectionMode, RangeImage, SensorModel, CHANNELS,
};
use crate::network::image_tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Crop width in columns; `None` keeps the full image.
    pub crop_width: Option<usize>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            crop_width: None,
        }
    }
}

/// Horizontal window `offset..offset + width`, wrapping at the image edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub offset: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augmentation {
    pub flip: bool,
    pub crop: Option<Crop>,
}

impl Augmentation {
    pub const NONE: Self = Self {
        flip: false,
        crop: None,
    };
}

pub fn draw_augmentation(
    cfg: &AugmentConfig,
    image_width: usize,
    rng: &mut impl Rng,
) -> Result<Augmentation> {
    let flip = rng.random::<f64>() < cfg.flip_prob;
    let crop = match cfg.crop_width {
        Some(width) if width > image_width => {
            return Err(Error::config(format!(
                "crop width {width} exceeds image width {image_width}"
            )))
        }
        Some(0) => return Err(Error::config("crop width must be positive")),
        Some(width) if width < image_width => Some(Crop {
            offset: rng.random_range(0..image_width),
            width,
        }),
        _ => None,
    };
    Ok(Augmentation { flip, crop })
}

const MIRROR: [[f64; 4]; 4] = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, -1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

/// `S T S` with `S = diag(1, -1, 1)`; stays a proper rotation.
pub fn mirror_pose(t: &RigidTransform) -> RigidTransform {
    let m = t.matrix();
    let s = |i: usize| MIRROR[i][i];
    let out = std::array::from_fn(|i| std::array::from_fn(|j| s(i) * m[i][j] * s(j)));
    RigidTransform::from_matrix(out).expect("conjugation preserves rigidity")
}

pub fn flip_frame(f: &Frame) -> Frame {
    let pts: Vec<Point> = f
        .cloud
        .iter()
        .map(|p| Point::new(p.x, -p.y, p.z, p.remission))
        .collect();
    Frame {
        cloud: PointCloud::new(pts).expect("mirroring keeps points valid"),
        labels: f.labels.clone(),
        pose: mirror_pose(&f.pose),
    }
}

impl Crop {
    fn column(&self, v: usize, w: usize) -> usize {
        (self.offset + v) % w
    }

    /// Crops the last axis of an `[n, c, h, w]` tensor.
    pub fn tensor(&self, t: &Tensor) -> Tensor {
        let [n, c, h, w] = t.shape();
        let mut out = Tensor::zeros([n, c, h, self.width]);
        for b in 0..n {
            for k in 0..c {
                for u in 0..h {
                    for v in 0..self.width {
                        let idx = out.index(b, k, u, v);
                        out.data_mut()[idx] = t.at(b, k, u, self.column(v, w));
                    }
                }
            }
        }
        out
    }

    /// Crops a row-major `h x w` per-pixel vector.
    pub fn pixels<T: Clone>(&self, p: &[T], h: usize, w: usize) -> Vec<T> {
        (0..h)
            .flat_map(|u| (0..self.width).map(move |v| (u, v)))
            .map(|(u, v)| p[u * w + self.column(v, w)].clone())
            .collect()
    }

    /// Restricts a full-resolution gather index to the window: targets are
    /// cropped, sources outside the window become empty.
    pub fn gather(&self, index: &[Option<usize>], h: usize, w: usize) -> Vec<Option<usize>> {
        self.pixels(index, h, w)
            .into_iter()
            .map(|src| {
                let src = src?;
                let (su, sv) = (src / w, src % w);
                let local = (sv + w - self.offset) % w;
                (local < self.width).then_some(su * self.width + local)
            })
            .collect()
    }
}

/// Network-ready form of one frame.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    /// `[1, 6, h, w']`.
    pub input: Tensor,
    /// Per-pixel training class; `None` for empty or ignored pixels. `None`
    /// overall for unlabelled frames.
    pub targets: Option<Vec<Option<usize>>>,
    /// Gather index aligning the previous frame's memory to this frame.
    pub warp: Option<Vec<Option<usize>>>,
    pub image: RangeImage,
}

/// Per-pixel targets of a projected labelled frame.
pub fn pixel_targets(
    ri: &RangeImage,
    labels: &[u32],
    mapping: &ClassMapping,
) -> Vec<Option<usize>> {
    ri.pixel_to_point()
        .iter()
        .map(|p| p.and_then(|i| mapping.target(labels[i])))
        .collect()
}

/// Applies `aug` to an ordered run of frames and builds inputs, targets and
/// inter-frame warps.
pub fn prepare_frames(
    frames: &[Frame],
    sensor: &SensorModel,
    mode: ProjectionMode,
    mapping: &ClassMapping,
    aug: Augmentation,
) -> Result<Vec<PreparedFrame>> {
    let (h, w) = (sensor.h(), sensor.w());
    let flipped: Vec<Frame>;
    let frames = if aug.flip {
        flipped = frames.iter().map(flip_frame).collect();
        &flipped[..]
    } else {
        frames
    };
    let mut out: Vec<PreparedFrame> = Vec::with_capacity(frames.len());
    for (k, f) in frames.iter().enumerate() {
        let ri = build_range_image(&f.cloud, sensor, mode)?;
        let targets = f.labels.as_ref().map(|l| pixel_targets(&ri, l, mapping));
        let warp = if k == 0 {
            None
        } else {
            let prev = &frames[k - 1];
            let rel = relative_transform(&prev.pose, &f.pose)?;
            Some(
                compute_warp_map(&prev.cloud, &out[k - 1].image, &rel, sensor, mode)?
                    .gather_index(),
            )
        };
        let input = image_tensor(&ri);
        let (input, targets, warp) = match aug.crop {
            Some(c) => (
                c.tensor(&input),
                targets.map(|t| c.pixels(&t, h, w)),
                warp.map(|g| c.gather(&g, h, w)),
            ),
            None => (input, targets, warp),
        };
        debug_assert_eq!(input.shape()[1], CHANNELS);
        out.push(PreparedFrame {
            input,
            targets,
            warp,
            image: ri,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{warp_memory, TemporalMemory, WarpMap};
    use crate::geometry::{CH_X, CH_Y};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frame(points: Vec<Point>, pose: RigidTransform) -> Frame {
        Frame {
            labels: Some(vec![1; points.len()]),
            cloud: PointCloud::new(points).unwrap(),
            pose,
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let f = frame(
            vec![
                Point::new(1.0, 2.0, 0.5, 0.3),
                Point::new(-3.0, 0.5, 1.0, 0.9),
            ],
            RigidTransform::from_euler_translation(0.1, -0.2, 0.7, [1.0, 2.0, 3.0]),
        );
        let back = flip_frame(&flip_frame(&f));
        assert_eq!(back.cloud, f.cloud);
        assert!(back.pose.max_abs_diff(&f.pose) == 0.0);
    }

    #[test]
    fn flip_negates_y_at_the_mirrored_column() {
        let m = SensorModel::uniform(2, 16, 10.0, -10.0).unwrap();
        let phi = m.column_azimuth(3);
        let p = Point::new(5.0 * phi.cos(), -5.0 * phi.sin(), 0.4, 0.5);
        let f = frame(vec![p], RigidTransform::identity());
        let a = build_range_image(&f.cloud, &m, ProjectionMode::Simple).unwrap();
        let b = build_range_image(&flip_frame(&f).cloud, &m, ProjectionMode::Simple).unwrap();
        let (u, v) = a.point_to_pixel()[0];
        assert_eq!(b.point_to_pixel()[0], (u, 16 - 1 - v));
        assert_eq!(b.get(CH_X, u, 15 - v), a.get(CH_X, u, v));
        assert_eq!(b.get(CH_Y, u, 15 - v), -a.get(CH_Y, u, v));
    }

    #[test]
    fn crop_is_shared_across_the_subsequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = AugmentConfig {
            flip_prob: 0.5,
            crop_width: Some(1024),
        };
        let aug = draw_augmentation(&cfg, 2048, &mut rng).unwrap();
        let crop = aug.crop.unwrap();
        assert_eq!(crop.width, 1024);
        let m = SensorModel::uniform(4, 2048, 10.0, -10.0).unwrap();
        let pts: Vec<Point> = (0..200)
            .map(|i| {
                let a = i as f64 * 0.031;
                Point::new(8.0 * a.cos(), 8.0 * a.sin(), 0.2, 0.1)
            })
            .collect();
        let frames: Vec<Frame> = (0..3)
            .map(|t| {
                frame(
                    pts.clone(),
                    RigidTransform::translation(0.1 * t as f64, 0.0, 0.0),
                )
            })
            .collect();
        let prep = prepare_frames(
            &frames,
            &m,
            ProjectionMode::Simple,
            &ClassMapping::synthetic(),
            aug,
        )
        .unwrap();
        for p in &prep {
            assert_eq!(p.input.shape(), [1, 6, 4, 1024]);
            assert_eq!(p.input, crop.tensor(&image_tensor(&p.image)));
        }
        let too_wide = AugmentConfig {
            flip_prob: 0.0,
            crop_width: Some(4096),
        };
        assert!(draw_augmentation(&too_wide, 2048, &mut rng).is_err());
    }

    #[test]
    fn warping_commutes_with_cropping() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = SensorModel::uniform(6, 64, 10.0, -15.0).unwrap();
        for case in 0..20 {
            let pts: Vec<Point> = (0..300)
                .map(|_| {
                    let a: f64 = rng.random_range(-3.1..3.1);
                    let r: f64 = rng.random_range(3.0..20.0);
                    let z: f64 = rng.random_range(-2.0..1.0);
                    Point::new(r * a.cos(), r * a.sin(), z, 0.5)
                })
                .collect();
            let pc = PointCloud::new(pts).unwrap();
            let ri = build_range_image(&pc, &m, ProjectionMode::Simple).unwrap();
            let rel =
                RigidTransform::from_yaw_translation(rng.random_range(-0.2..0.2), 0.5, 0.1, 0.0);
            let wm: WarpMap = compute_warp_map(&pc, &ri, &rel, &m, ProjectionMode::Simple).unwrap();
            let c = 4;
            let feats: Vec<f64> = (0..c * 6 * 64)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let mem = TemporalMemory::from_features(c, 6, 64, feats.clone()).unwrap();
            let full = warp_memory(&mem, &wm).unwrap();
            let crop = Crop {
                offset: (case * 7) % 64,
                width: 32,
            };
            let mem_t = Tensor::from_vec([1, c, 6, 64], feats).unwrap();
            let cropped_mem = crop.tensor(&mem_t);
            let index = crop.gather(&wm.gather_index(), 6, 64);
            let full_t = Tensor::from_vec([1, c, 6, 64], full.features().to_vec()).unwrap();
            let want = crop.tensor(&full_t);
            for (p, src) in index.iter().enumerate() {
                let (u, v) = (p / 32, p % 32);
                for k in 0..c {
                    let got = src.map_or(0.0, |s| cropped_mem.at(0, k, s / 32, s % 32));
                    // Interior pixels: the source lies inside the window.
                    if src.is_some() || wm.gather_index()[u * 64 + (crop.offset + v) % 64].is_none()
                    {
                        assert_eq!(got, want.at(0, k, u, v));
                    }
                }
            }
        }
    }
}
