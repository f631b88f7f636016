//! Confusion-matrix evaluation: per-class IoU, mIoU and overall accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `h×w` map of class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl ClassMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::dim(format!("{} labels for {h}×{w}", data.len())));
        }
        Ok(ClassMap { h, w, data })
    }

    pub fn filled(h: usize, w: usize, v: u8) -> Self {
        ClassMap {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.w + c]
    }
}

/// `counts[g][p]` = pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tallies one prediction against ground truth. Pixels whose ground
    /// truth equals `ignore` are skipped.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8], ignore: Option<u8>) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::dim(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.num_classes;
        let mut local = vec![0u64; k * k];
        for (&p, &g) in pred.iter().zip(gt) {
            if Some(g) == ignore {
                continue;
            }
            let (p, g) = (usize::from(p), usize::from(g));
            if p >= k || g >= k {
                return Err(Error::Data(format!(
                    "class pair (gt {g}, pred {p}) outside [0, {k})"
                )));
            }
            local[g * k + p] += 1;
        }
        self.counts.iter_mut().zip(local).for_each(|(c, n)| *c += n);
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::dim("merging confusion matrices of different sizes"));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `TP/(TP+FP+FN)` per class; `None` for classes absent from both
    /// prediction and ground truth.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let tp = self.count(c, c);
                let fp: u64 = (0..k).filter(|&g| g != c).map(|g| self.count(g, c)).sum();
                let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| self.count(c, p)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean IoU over present classes (`None` if no class is present).
    pub fn miou(&self) -> Option<f64> {
        let present: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }

    pub fn overall_accuracy(&self) -> Option<f64> {
        let total = self.total();
        let trace: u64 = (0..self.num_classes).map(|c| self.count(c, c)).sum();
        (total > 0).then(|| trace as f64 / total as f64)
    }
}

/// One JSON-lines evaluation record.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub image: String,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub oa: Option<f64>,
}

impl MetricsRecord {
    pub fn from_matrix(image: impl Into<String>, cm: &ConfusionMatrix) -> Self {
        MetricsRecord {
            image: image.into(),
            per_class_iou: cm.iou_per_class(),
            miou: cm.miou(),
            oa: cm.overall_accuracy(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_tally() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 1], None).unwrap();
        assert_eq!((cm.count(0, 0), cm.count(0, 1), cm.count(1, 0), cm.count(1, 1)), (1, 1, 0, 2));
        let iou = cm.iou_per_class();
        assert_eq!(iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((cm.miou().unwrap() - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(cm.overall_accuracy(), Some(0.75));
    }

    #[test]
    fn perfect_and_disjoint() {
        let mut cm = ConfusionMatrix::new(3);
        let gt = [0, 1, 2, 2, 1, 0];
        cm.accumulate(&gt, &gt, None).unwrap();
        assert!((0..3).all(|g| (0..3).all(|p| g == p || cm.count(g, p) == 0)));
        assert_eq!(cm.miou(), Some(1.0));
        assert_eq!(cm.overall_accuracy(), Some(1.0));

        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[1, 1], &[0, 0], None).unwrap();
        assert_eq!(cm.iou_per_class(), vec![Some(0.0), Some(0.0)]);
    }

    #[test]
    fn empty_ignore_and_errors() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[], &[], None).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(2));
        assert_eq!(cm.miou(), None);
        cm.accumulate(&[0, 1], &[255, 1], Some(255)).unwrap();
        assert_eq!(cm.total(), 1);
        assert!(cm.accumulate(&[0], &[0, 1], None).is_err());
        assert!(matches!(cm.accumulate(&[2], &[0], None), Err(Error::Data(_))));
    }

    #[test]
    fn single_present_class() {
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&[2; 9], &[2; 9], None).unwrap();
        assert_eq!(cm.iou_per_class(), vec![None, None, Some(1.0), None]);
        assert_eq!(cm.miou(), Some(1.0));
    }

    #[test]
    fn random_guessing_on_balanced_truth() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let n = 10_000;
        let gt: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let pred: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &gt, None).unwrap();
        assert!((cm.overall_accuracy().unwrap() - 0.5).abs() < 0.05);
    }

    proptest! {
        #[test]
        fn bounds_and_order_independence(
            k in 1usize..5,
            maps in proptest::collection::vec(proptest::collection::vec((0u8..4, 0u8..4), 1..40), 1..5)
        ) {
            let maps: Vec<(Vec<u8>, Vec<u8>)> = maps
                .into_iter()
                .map(|m| m.into_iter().map(|(a, b)| (a % k as u8, b % k as u8)).unzip())
                .collect();
            let mut fwd = ConfusionMatrix::new(k);
            for (p, g) in &maps {
                fwd.accumulate(p, g, None).unwrap();
            }
            let mut rev = ConfusionMatrix::new(k);
            for (p, g) in maps.iter().rev() {
                rev.accumulate(p, g, None).unwrap();
            }
            prop_assert_eq!(&fwd, &rev);
            for v in fwd.iou_per_class().into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let oa = fwd.overall_accuracy().unwrap();
            let total = fwd.total() as f64;
            for c in 0..k {
                prop_assert!(oa >= fwd.count(c, c) as f64 / total);
            }
        }
    }
}
