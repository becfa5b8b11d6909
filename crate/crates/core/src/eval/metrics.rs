//! Confusion matrix and intersection-over-union.

use crate::error::{Error, Result};

/// Rows are ground truth, columns predictions. Ground truth equal to the
/// ignore id is skipped; a prediction equal to the ignore id (a point that
/// received no label) counts as a miss for its ground-truth class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    ignore: Option<u32>,
    counts: Vec<u64>,
    unlabelled: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// `None` for classes absent from both ground truth and predictions.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize, ignore: Option<u32>) -> Self {
        Self {
            classes,
            ignore,
            counts: vec![0; classes * classes],
            unlabelled: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    /// Evaluated points, including those predicted as ignore.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.unlabelled.iter().sum::<u64>()
    }

    pub fn accumulate(&mut self, gt: &[u32], pred: &[u32]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::shape(format!(
                "{} ground-truth labels, {} predictions",
                gt.len(),
                pred.len()
            )));
        }
        let c = self.classes as u32;
        let bad = |l: u32| l >= c && Some(l) != self.ignore;
        if let Some(l) = gt.iter().chain(pred).find(|l| bad(**l)) {
            return Err(Error::Label(format!("label {l} outside [0, {c})")));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            if Some(g) == self.ignore {
                continue;
            }
            if Some(p) == self.ignore {
                self.unlabelled[g as usize] += 1;
            } else {
                self.counts[g as usize * self.classes + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes || other.ignore != self.ignore {
            return Err(Error::shape("confusion matrices disagree on classes"));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        self.unlabelled
            .iter_mut()
            .zip(&other.unlabelled)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn iou(&self) -> Result<IouReport> {
        if self.total() == 0 {
            return Err(Error::UndefinedMetric("confusion matrix is empty"));
        }
        let c = self.classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|p| self.get(k, p)).sum::<u64>() + self.unlabelled[k];
                let col: u64 = (0..c).map(|g| self.get(g, k)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        Ok(IouReport { per_class, mean })
    }

    /// Mean IoU over classes present in ground truth or predictions.
    pub fn miou(&self) -> Result<f64> {
        Ok(self.iou()?.mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    #[test]
    fn hand_case() {
        let mut cm = ConfusionMatrix::new(2, None);
        cm.accumulate(&[0, 0, 1], &[0, 1, 1]).unwrap();
        assert_eq!(
            (cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)),
            (1, 1, 0, 1)
        );
        let r = cm.iou().unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(0.5)]);
        assert_eq!(r.mean, 0.5);
    }

    #[test]
    fn perfect_and_ignored() {
        let mut cm = ConfusionMatrix::new(3, Some(3));
        cm.accumulate(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap();
        assert_eq!(cm.miou().unwrap(), 1.0);
        let before = cm.clone();
        cm.accumulate(&[3, 3], &[0, 2]).unwrap();
        assert_eq!(cm, before);
    }

    #[test]
    fn empty_and_invalid() {
        let cm = ConfusionMatrix::new(2, None);
        assert!(matches!(cm.miou(), Err(Error::UndefinedMetric(_))));
        let mut cm = ConfusionMatrix::new(2, None);
        assert!(matches!(cm.accumulate(&[2], &[0]), Err(Error::Label(_))));
        assert!(cm.accumulate(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn absent_classes_are_excluded() {
        let mut cm = ConfusionMatrix::new(4, None);
        cm.accumulate(&[0, 1], &[0, 1]).unwrap();
        let r = cm.iou().unwrap();
        assert_eq!(r.per_class[2], None);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn unlabelled_prediction_is_a_miss() {
        let mut cm = ConfusionMatrix::new(2, Some(2));
        cm.accumulate(&[0, 0], &[0, 2]).unwrap();
        assert_eq!(cm.iou().unwrap().per_class[0], Some(0.5));
    }

    /// IoU from explicit index sets.
    fn brute_force(gt: &[u32], pred: &[u32], c: u32) -> f64 {
        let mut ious = Vec::new();
        for k in 0..c {
            let a: BTreeSet<usize> = (0..gt.len()).filter(|&i| gt[i] == k).collect();
            let b: BTreeSet<usize> = (0..pred.len()).filter(|&i| pred[i] == k).collect();
            let union = a.union(&b).count();
            if union > 0 {
                ious.push(a.intersection(&b).count() as f64 / union as f64);
            }
        }
        ious.iter().sum::<f64>() / ious.len() as f64
    }

    #[test]
    fn matches_set_oracle_and_merges() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..1000 {
            let c = rng.random_range(1..7u32);
            let n = rng.random_range(1..200);
            let gt: Vec<u32> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let pred: Vec<u32> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let mut cm = ConfusionMatrix::new(c as usize, None);
            cm.accumulate(&gt, &pred).unwrap();
            assert!((cm.miou().unwrap() - brute_force(&gt, &pred, c)).abs() < 1e-12);
            let split = n / 2;
            let mut a = ConfusionMatrix::new(c as usize, None);
            let mut b = a.clone();
            a.accumulate(&gt[..split], &pred[..split]).unwrap();
            b.accumulate(&gt[split..], &pred[split..]).unwrap();
            a.merge(&b).unwrap();
            assert_eq!(a, cm);
        }
    }
}
