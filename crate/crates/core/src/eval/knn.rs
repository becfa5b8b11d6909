//! Range-based k-nearest-neighbour transfer of pixel labels to points.

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RangeImage, CH_RANGE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KnnConfig {
    pub k: usize,
    /// Odd side length of the square search window.
    pub window: usize,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self { k: 5, window: 5 }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.window % 2 == 0 {
            return Err(Error::config("knn needs k >= 1 and an odd window"));
        }
        Ok(())
    }
}

/// Labels every point of `cloud`. A point that owns its pixel keeps that
/// pixel's label. A shadowed point votes among the `k` occupied pixels of
/// the window around its pixel with the smallest absolute range difference;
/// ties go to the tied label whose best candidate is nearest. A point
/// without candidates takes its pixel's label, or `unlabeled` when that
/// pixel is empty.
pub fn knn_backproject(
    cloud: &PointCloud,
    ri: &RangeImage,
    pixel_labels: &[u32],
    cfg: KnnConfig,
    unlabeled: u32,
) -> Result<Vec<u32>> {
    cfg.validate()?;
    let (h, w) = (ri.h(), ri.w());
    if pixel_labels.len() != h * w {
        return Err(Error::shape(format!(
            "{} pixel labels for a {h}x{w} image",
            pixel_labels.len()
        )));
    }
    if ri.n_points() != cloud.len() {
        return Err(Error::shape("range image was not built from this cloud"));
    }
    let half = (cfg.window / 2) as isize;
    let mut cands: Vec<(f64, u32)> = Vec::with_capacity(cfg.window * cfg.window);
    let mut votes: Vec<(u32, usize, usize)> = Vec::with_capacity(cfg.k);
    let out = cloud
        .iter()
        .zip(ri.point_to_pixel())
        .enumerate()
        .map(|(i, (p, &(u, v)))| {
            if ri.pixel_to_point()[u * w + v] == Some(i) {
                return pixel_labels[u * w + v];
            }
            let r = p.range();
            cands.clear();
            for du in -half..=half {
                let uu = u as isize + du;
                if uu < 0 || uu >= h as isize {
                    continue;
                }
                for dv in -half..=half {
                    let vv = (v as isize + dv).rem_euclid(w as isize) as usize;
                    let uu = uu as usize;
                    if ri.occupied(uu, vv) {
                        cands.push((
                            (ri.get(CH_RANGE, uu, vv) - r).abs(),
                            pixel_labels[uu * w + vv],
                        ));
                    }
                }
            }
            if cands.is_empty() {
                return if ri.occupied(u, v) {
                    pixel_labels[u * w + v]
                } else {
                    unlabeled
                };
            }
            cands.sort_by(|a, b| a.0.total_cmp(&b.0));
            // (label, count, rank of its nearest candidate)
            votes.clear();
            for (rank, &(_, l)) in cands.iter().take(cfg.k).enumerate() {
                match votes.iter_mut().find(|e| e.0 == l) {
                    Some(e) => e.1 += 1,
                    None => votes.push((l, 1, rank)),
                }
            }
            votes
                .iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2)))
                .map(|e| e.0)
                .expect("at least one candidate")
        })
        .collect();
    Ok(out)
}

/// Label of each point's own pixel.
pub fn pixel_lookup(ri: &RangeImage, pixel_labels: &[u32]) -> Vec<u32> {
    let w = ri.w();
    ri.point_to_pixel()
        .iter()
        .map(|&(u, v)| pixel_labels[u * w + v])
        .collect()
}
