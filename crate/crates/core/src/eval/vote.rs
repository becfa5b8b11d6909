//! Temporal baseline: majority vote over label images warped into the
//! current frame.

use crate::alignment::{compute_warp_map, relative_transform, RigidTransform};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, ProjectionMode, RangeImage, SensorModel};

/// A frame's cloud, range image, pose and per-pixel labels.
#[derive(Debug, Clone)]
pub struct LabelledFrame {
    pub cloud: PointCloud,
    pub image: RangeImage,
    pub pose: RigidTransform,
    pub labels: Vec<u32>,
}

/// Fuses the last frame of `frames` with the ones before it. Each earlier
/// label image is warped with the nearest-range collision rule; every
/// occupied pixel then takes the most frequent label among the current and
/// warped labels. Ties keep the current label if it is tied, else the most
/// recent tied label.
pub fn majority_vote_baseline(
    frames: &[LabelledFrame],
    sensor: &SensorModel,
    mode: ProjectionMode,
) -> Result<Vec<u32>> {
    let (cur, past) = frames
        .split_last()
        .ok_or_else(|| Error::Sequence("majority vote needs at least one frame".into()))?;
    let hw = sensor.h() * sensor.w();
    if frames.iter().any(|f| f.labels.len() != hw) {
        return Err(Error::shape("label image does not match the sensor"));
    }
    // Most recent first so that tie-breaking prefers recent frames.
    let mut warped: Vec<Vec<Option<u32>>> = Vec::with_capacity(past.len());
    for f in past.iter().rev() {
        let rel = relative_transform(&f.pose, &cur.pose)?;
        let wm = compute_warp_map(&f.cloud, &f.image, &rel, sensor, mode)?;
        warped.push(
            wm.gather_index()
                .iter()
                .map(|s| s.map(|i| f.labels[i]))
                .collect(),
        );
    }
    let mut out = cur.labels.clone();
    let mut tally: Vec<(u32, usize)> = Vec::new();
    for (p, slot) in out.iter_mut().enumerate() {
        if cur.image.pixel_to_point()[p].is_none() {
            continue;
        }
        tally.clear();
        tally.push((*slot, 1));
        for l in warped.iter().filter_map(|w| w[p]) {
            match tally.iter_mut().find(|e| e.0 == l) {
                Some(e) => e.1 += 1,
                None => tally.push((l, 1)),
            }
        }
        // First maximum in insertion order: current, then most recent.
        let best = tally
            .iter()
            .fold(tally[0], |acc, e| if e.1 > acc.1 { *e } else { acc });
        *slot = best.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_range_image, Point};

    fn scene(m: &SensorModel) -> (PointCloud, RangeImage) {
        let angles = m.row_angles();
        let pts: Vec<Point> = (0..m.h())
            .flat_map(|u| (0..m.w()).map(move |v| (u, v)))
            .map(|(u, v)| {
                let [x, y, z] = crate::geometry::SphericalCoords {
                    theta: angles[u],
                    phi: m.column_azimuth(v),
                    r: 6.0 + v as f64 * 0.1,
                }
                .to_cartesian();
                Point::new(x, y, z, 0.5)
            })
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let ri = build_range_image(&cloud, m, ProjectionMode::Simple).unwrap();
        (cloud, ri)
    }

    fn frame(m: &SensorModel, labels: Vec<u32>) -> LabelledFrame {
        let (cloud, image) = scene(m);
        LabelledFrame {
            cloud,
            image,
            pose: RigidTransform::identity(),
            labels,
        }
    }

    #[test]
    fn single_frame_and_agreement_are_identity() {
        let m = SensorModel::uniform(2, 8, 5.0, -5.0).unwrap();
        let labels: Vec<u32> = (0..16).map(|i| i % 3).collect();
        let one = [frame(&m, labels.clone())];
        assert_eq!(
            majority_vote_baseline(&one, &m, ProjectionMode::Simple).unwrap(),
            labels
        );
        let five: Vec<_> = (0..5).map(|_| frame(&m, labels.clone())).collect();
        assert_eq!(
            majority_vote_baseline(&five, &m, ProjectionMode::Simple).unwrap(),
            labels
        );
    }

    #[test]
    fn corrupted_label_is_outvoted() {
        let m = SensorModel::uniform(2, 8, 5.0, -5.0).unwrap();
        let clean = vec![1u32; 16];
        let mut bad = clean.clone();
        bad[5] = 3;
        let mut frames: Vec<_> = (0..4).map(|_| frame(&m, clean.clone())).collect();
        frames.push(frame(&m, bad));
        assert_eq!(
            majority_vote_baseline(&frames, &m, ProjectionMode::Simple).unwrap(),
            clean
        );
    }

    #[test]
    fn ties_keep_the_current_label_and_no_label_is_invented() {
        let m = SensorModel::uniform(2, 8, 5.0, -5.0).unwrap();
        let frames = vec![frame(&m, vec![2; 16]), frame(&m, vec![0; 16])];
        let out = majority_vote_baseline(&frames, &m, ProjectionMode::Simple).unwrap();
        assert_eq!(out, vec![0; 16]);
        let frames = vec![
            frame(&m, vec![2; 16]),
            frame(&m, vec![4; 16]),
            frame(&m, vec![0; 16]),
        ];
        let out = majority_vote_baseline(&frames, &m, ProjectionMode::Simple).unwrap();
        assert!(out.iter().all(|l| [0, 2, 4].contains(l)));
    }
}
