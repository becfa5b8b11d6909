//! Warps a memory image from one frame into the next with the recorded ego
//! motion and reports how much of it lands on the new frame's points.

use rangeseg::alignment::{align, TemporalMemory};
use rangeseg::data::{generate_synthetic, SyntheticSceneSpec};
use rangeseg::geometry::{build_range_image, ProjectionMode, SensorModel};

fn main() -> rangeseg::Result<()> {
    let spec = SyntheticSceneSpec::from_toml(include_str!("../configs/scene_toy.toml"))?;
    let sensor = SensorModel::from_config(&spec.sensor)?;
    let frames = generate_synthetic(&spec, 0)?;
    let (prev, curr) = (&frames[10], &frames[11]);
    let mode = ProjectionMode::Simple;
    let ri_prev = build_range_image(&prev.cloud, &sensor, mode)?;
    let ri_curr = build_range_image(&curr.cloud, &sensor, mode)?;

    // One channel holding each pixel's range.
    let (h, w) = (sensor.h(), sensor.w());
    let ranges: Vec<f64> = (0..h * w)
        .map(|p| ri_prev.pixel_to_point()[p].map_or(0.0, |i| prev.cloud.points()[i].range()))
        .collect();
    let memory = TemporalMemory::from_features(1, h, w, ranges)?;

    let warped = align(
        &memory,
        &prev.cloud,
        &ri_prev,
        &prev.pose,
        &curr.pose,
        &sensor,
        mode,
    )?;
    let valid = warped.valid_mask().iter().filter(|v| **v).count();
    let overlap = (0..h * w)
        .filter(|&p| warped.valid_mask()[p] && ri_curr.pixel_to_point()[p].is_some())
        .count();
    println!("memory pixels before warp: {}", ri_prev.occupied_count());
    println!("memory pixels after warp:  {valid}");
    println!(
        "overlap with next frame:   {overlap} of {}",
        ri_curr.occupied_count()
    );
    Ok(())
}
