//! Randomised four-class scenes for small training experiments.
//!
//! Boxes of random size belong to one of three classes that differ only in
//! remission, and that remission is revealed on a random subset of frames.
//! A single frame is therefore often ambiguous while a short history is not.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::Sequence;
use super::mapping::ClassMapping;
use super::synthetic::{
    generate_synthetic, BoxSpec, EgoSpec, GroundSpec, SyntheticSceneSpec, SCENE_VERSION,
};
use crate::error::Result;
use crate::geometry::SensorModel;

/// Remission of raw classes 2, 3 and 4 when revealed.
pub const CLASS_REMISSION: [f64; 3] = [0.95, 0.05, 0.65];
/// Remission of a box on frames where its class is hidden.
pub const NEUTRAL_REMISSION: f64 = 0.35;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySceneConfig {
    pub h: usize,
    pub w: usize,
    pub frames: usize,
    pub static_boxes: usize,
    pub moving_boxes: usize,
    /// Per-frame probability that a box shows its class remission.
    pub reveal_prob: f64,
    pub speed: f64,
    pub yaw_rate: f64,
    pub noise_sigma: f64,
}

impl Default for ToySceneConfig {
    fn default() -> Self {
        Self {
            h: 8,
            w: 64,
            frames: 25,
            static_boxes: 6,
            moving_boxes: 2,
            reveal_prob: 0.35,
            speed: 0.2,
            yaw_rate: 0.15,
            noise_sigma: 0.01,
        }
    }
}

/// Scene spec for one random sequence.
pub fn toy_scene(cfg: &ToySceneConfig, seed: u64) -> Result<SyntheticSceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sensor = SensorModel::uniform(cfg.h, cfg.w, 2.0, -22.0)?.to_config();
    let mut boxes = Vec::new();
    for i in 0..cfg.static_boxes + cfg.moving_boxes {
        let dist = rng.random_range(5.0..13.0);
        let az = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let height = rng.random_range(1.0..2.5);
        let class = rng.random_range(0..3usize);
        let velocity = if i >= cfg.static_boxes {
            let dir = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let v = rng.random_range(0.1..0.3);
            [v * dir.cos(), v * dir.sin(), 0.0]
        } else {
            [0.0; 3]
        };
        boxes.push(BoxSpec {
            center: [dist * az.cos(), dist * az.sin(), 0.5 * height],
            size: [
                rng.random_range(0.8..3.0),
                rng.random_range(0.8..3.0),
                height,
            ],
            yaw: rng.random_range(0.0..std::f64::consts::PI),
            class: 2 + class as u32,
            velocity,
            remission: Some(CLASS_REMISSION[class]),
            remission_visible_prob: cfg.reveal_prob,
        });
    }
    let spec = SyntheticSceneSpec {
        format_version: SCENE_VERSION,
        sensor,
        frames: cfg.frames,
        noise_sigma: cfg.noise_sigma,
        max_range: 40.0,
        default_remission: NEUTRAL_REMISSION,
        ground: Some(GroundSpec {
            class: 1,
            remission: 0.2,
        }),
        ego: EgoSpec {
            height: 1.7,
            start: [
                0.0,
                0.0,
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            ],
            speed: cfg.speed,
            yaw_rate: cfg.yaw_rate * if rng.random::<bool>() { 1.0 } else { -1.0 },
            poses: None,
        },
        boxes,
    };
    spec.validate()?;
    Ok(spec)
}

/// `count` generated sequences with seeds `seed, seed + 1, ...`.
pub fn toy_dataset(cfg: &ToySceneConfig, seed: u64, count: usize) -> Result<Vec<Sequence>> {
    let mapping = ClassMapping::synthetic();
    (0..count as u64)
        .map(|i| {
            let s = seed.wrapping_add(i);
            let spec = toy_scene(cfg, s)?;
            let frames = generate_synthetic(&spec, s ^ 0x5eed)?;
            Sequence::from_synthetic(format!("toy-{s}"), &spec, &frames, &mapping)
        })
        .collect()
}
