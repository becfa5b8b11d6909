use std::collections::HashSet;

use proptest::prelude::*;

use rangeseg::alignment::RigidTransform;
use rangeseg::eval::{
    knn_backproject, majority_vote_baseline, pixel_lookup, ConfusionMatrix, KnnConfig,
    LabelledFrame,
};
use rangeseg::geometry::{
    build_range_image, cartesian_to_spherical, project, Point, PointCloud, ProjectionMode,
    SensorModel,
};
use rangeseg::training::{compute_class_weights, tbptt_schedule, TbpttConfig};

fn coord() -> impl Strategy<Value = f64> {
    -60.0..60.0f64
}

fn cloud(max: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec((coord(), coord(), -5.0..5.0f64), 1..max).prop_filter_map(
        "degenerate point",
        |v| {
            let pts: Vec<Point> = v
                .into_iter()
                .filter(|(x, y, _)| x.hypot(*y) > 0.5)
                .map(|(x, y, z)| Point::new(x, y, z, 0.5))
                .collect();
            PointCloud::new(pts).ok().filter(|c| !c.is_empty())
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn projection_stays_inside_the_image(x in coord(), y in coord(), z in coord()) {
        prop_assume!(x.abs() + y.abs() + z.abs() > 1e-3);
        let s = cartesian_to_spherical([x, y, z]).unwrap();
        for (m, mode) in [
            (SensorModel::uniform(32, 512, 10.0, -30.0).unwrap(), ProjectionMode::Simple),
            (SensorModel::nonuniform_64(1024).unwrap(), ProjectionMode::Simple),
            (SensorModel::nonuniform_64(1024).unwrap(), ProjectionMode::Adaptive),
        ] {
            let px = project(&s, &m, mode).unwrap();
            prop_assert!(px.u < m.h() && px.v < m.w());
        }
    }

    #[test]
    fn rarer_classes_never_weigh_less(counts in prop::collection::vec(0u64..1_000_000, 2..20)) {
        prop_assume!(counts.iter().sum::<u64>() > 0);
        let w = compute_class_weights(&counts).unwrap().weights;
        for i in 0..counts.len() {
            for j in 0..counts.len() {
                if counts[i] < counts[j] {
                    prop_assert!(w[i] >= w[j]);
                }
            }
        }
    }

    #[test]
    fn miou_is_invariant_to_class_renaming(
        pairs in prop::collection::vec((0u32..6, 0u32..6), 1..400),
        perm in Just((0u32..6).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let (gt, pred): (Vec<u32>, Vec<u32>) = pairs.into_iter().unzip();
        let mut a = ConfusionMatrix::new(6, None);
        a.accumulate(&gt, &pred).unwrap();
        let rename = |v: &[u32]| v.iter().map(|l| perm[*l as usize]).collect::<Vec<_>>();
        let mut b = ConfusionMatrix::new(6, None);
        b.accumulate(&rename(&gt), &rename(&pred)).unwrap();
        prop_assert!((a.miou().unwrap() - b.miou().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn schedule_windows_are_disjoint_when_k1_equals_k2(k in 1usize..8, extra in 0usize..10, len in 1usize..60) {
        let k3 = k + extra;
        prop_assume!(len >= k3);
        let s = tbptt_schedule(&TbpttConfig { k1: k, k2: k, k3, length: len }).unwrap();
        let mut seen = HashSet::new();
        for u in &s {
            prop_assert!(u.frame >= k3 && u.frame <= len && u.start >= 1);
            prop_assert_eq!(u.frame + 1 - u.start, k);
            for f in u.frames() {
                prop_assert!(seen.insert(f));
            }
        }
        let expected = if s.is_empty() { 0 } else { s.last().unwrap().frame - (k3 - k) };
        prop_assert_eq!(seen.len(), expected);
    }

    #[test]
    fn single_pixel_window_is_pixel_lookup(c in cloud(400), seed in 0u32..1000) {
        let m = SensorModel::uniform(16, 64, 10.0, -30.0).unwrap();
        let ri = build_range_image(&c, &m, ProjectionMode::Simple).unwrap();
        let labels: Vec<u32> = (0..16 * 64u32).map(|i| (i.wrapping_mul(2654435761).wrapping_add(seed)) % 5).collect();
        let knn = knn_backproject(&c, &ri, &labels, KnnConfig { k: 1, window: 1 }, 99).unwrap();
        prop_assert_eq!(knn, pixel_lookup(&ri, &labels));
    }

    #[test]
    fn pixel_owners_keep_their_label(c in cloud(400), k in 1usize..8, half in 0usize..3) {
        let m = SensorModel::uniform(16, 64, 10.0, -30.0).unwrap();
        let ri = build_range_image(&c, &m, ProjectionMode::Simple).unwrap();
        let labels: Vec<u32> = (0..16 * 64u32).map(|i| i % 7).collect();
        let knn = knn_backproject(&c, &ri, &labels, KnnConfig { k, window: 2 * half + 1 }, 99).unwrap();
        let palette: HashSet<u32> = labels.iter().copied().collect();
        for (i, &(u, v)) in ri.point_to_pixel().iter().enumerate() {
            if ri.pixel_to_point()[u * 64 + v] == Some(i) {
                prop_assert_eq!(knn[i], labels[u * 64 + v]);
            } else {
                prop_assert!(palette.contains(&knn[i]));
            }
        }
    }

    #[test]
    fn majority_vote_never_invents_labels(
        clouds in prop::collection::vec(cloud(200), 1..4),
        yaws in prop::collection::vec(-0.3..0.3f64, 4),
    ) {
        let m = SensorModel::uniform(8, 32, 10.0, -30.0).unwrap();
        let frames: Vec<LabelledFrame> = clouds
            .into_iter()
            .enumerate()
            .map(|(t, cloud)| {
                let image = build_range_image(&cloud, &m, ProjectionMode::Simple).unwrap();
                let labels = (0..8 * 32).map(|p| (10 * t + p % 3) as u32).collect();
                LabelledFrame { cloud, image, pose: RigidTransform::from_yaw_translation(yaws[t], t as f64, 0.0, 0.0), labels }
            })
            .collect();
        let out = majority_vote_baseline(&frames, &m, ProjectionMode::Simple).unwrap();
        let cur = &frames.last().unwrap().labels;
        let image = &frames.last().unwrap().image;
        let pool: HashSet<u32> = frames.iter().flat_map(|f| f.labels.iter().copied()).collect();
        for (p, l) in out.iter().enumerate() {
            if image.pixel_to_point()[p].is_none() {
                prop_assert_eq!(*l, cur[p]);
            }
            prop_assert!(*l == cur[p] || pool.contains(l));
        }
    }
}
