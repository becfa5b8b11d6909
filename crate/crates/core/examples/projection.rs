//! Projects one ideal scan of a 64-row non-uniform sensor with both
//! projection modes and prints how many points keep a pixel of their own.

use rangeseg::data::{generate_synthetic, BoxSpec, GroundSpec, SyntheticSceneSpec};
use rangeseg::geometry::{build_range_image, collision_free_fraction, ProjectionMode, SensorModel};

fn main() -> rangeseg::Result<()> {
    let sensor = SensorModel::nonuniform_64(1024)?;
    let spec = SyntheticSceneSpec {
        format_version: 1,
        sensor: sensor.to_config(),
        frames: 1,
        noise_sigma: 0.0,
        max_range: 80.0,
        default_remission: 0.5,
        ground: Some(GroundSpec::default()),
        ego: Default::default(),
        boxes: vec![BoxSpec {
            center: [10.0, 2.0, 1.0],
            size: [4.0, 2.0, 2.0],
            yaw: 0.2,
            class: 2,
            velocity: [0.0; 3],
            remission: None,
            remission_visible_prob: 1.0,
        }],
    };
    let cloud = generate_synthetic(&spec, 0)?.remove(0).cloud;
    for mode in [ProjectionMode::Simple, ProjectionMode::Adaptive] {
        let ri = build_range_image(&cloud, &sensor, mode)?;
        println!(
            "{mode:?}: {} points, {} occupied pixels, collision-free fraction {:.4}",
            cloud.len(),
            ri.occupied_count(),
            collision_free_fraction(&ri)?
        );
    }
    Ok(())
}
