//! Transfers pixel labels back to points. Two surfaces share a column; the
//! farther one is hidden in the image and recovers its label from range
//! neighbours.

use rangeseg::eval::{knn_backproject, pixel_lookup, KnnConfig};
use rangeseg::geometry::{
    build_range_image, Point, PointCloud, ProjectionMode, SensorModel, SphericalCoords,
};

fn main() -> rangeseg::Result<()> {
    let m = SensorModel::uniform(1, 16, 1.0, -1.0)?;
    let at = |v: usize, r: f64| {
        let [x, y, z] = SphericalCoords {
            theta: 0.0,
            phi: m.column_azimuth(v),
            r,
        }
        .to_cartesian();
        Point::new(x, y, z, 0.5)
    };
    // A near wall on columns 7 and 8, a far wall on column 9 and a far point
    // hidden behind column 7.
    let cloud = PointCloud::new(vec![at(7, 5.0), at(8, 5.1), at(9, 9.0), at(7, 9.02)])?;
    let ri = build_range_image(&cloud, &m, ProjectionMode::Simple)?;
    let mut labels = vec![0u32; 16];
    labels[7] = 1;
    labels[8] = 1;
    labels[9] = 2;
    let direct = pixel_lookup(&ri, &labels);
    let knn = knn_backproject(
        &cloud,
        &ri,
        &labels,
        KnnConfig { k: 2, window: 5 },
        u32::MAX,
    )?;
    for (i, p) in cloud.iter().enumerate() {
        println!(
            "point {i} at range {:.2}: pixel label {}, knn label {}",
            p.range(),
            direct[i],
            knn[i]
        );
    }
    Ok(())
}
