//! Evaluation: pixel confusion counts over the `K+1` classes, per-class and
//! mean IoU, and image-level unknown-detection scores.
//!
//! Conventions, fixed once here so every report agrees:
//!
//! * ground-truth pixels labeled [`crate::label::VOID`] are skipped;
//! * a class absent from both ground truth and prediction has no defined
//!   IoU (`None`) and is excluded from every mean;
//! * `miou` averages all `K+1` classes, `miou_star` only the `K` known ones;
//! * values stay as fractions in `[0,1]`; rounding to one decimal percent
//!   happens only at formatting time, never inside the arithmetic.

use crate::label::{LabelMap, VOID};
use crate::{invalid_err, shape_err, Result};
use alloc::vec;
use alloc::vec::Vec;

/// An image counts as "contains unknown" when more than this fraction of its
/// pixels is predicted unknown.
pub const DEFAULT_TAU_IMG: f64 = 0.001;

/// Square confusion matrix over classes `1..=K+1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    k: usize,
    /// `(K+1)²` counts, ground-truth-major.
    counts: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(k: usize) -> Self {
        let c = k + 1;
        ConfusionAccumulator {
            k,
            counts: vec![0; c * c],
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Count of pixels with ground truth `gt` predicted as `pred`
    /// (1-based class ids).
    pub fn count(&self, gt: u8, pred: u8) -> u64 {
        let c = self.k + 1;
        self.counts[(gt as usize - 1) * c + (pred as usize - 1)]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulates one image. Void ground truth is skipped; any other label
    /// outside `1..=K+1` (on either side) is an error.
    pub fn add(&mut self, gt: &LabelMap, pred: &LabelMap) -> Result<()> {
        if gt.height() != pred.height() || gt.width() != pred.width() {
            return Err(shape_err!(
                "ground truth {}x{} vs prediction {}x{}",
                gt.height(),
                gt.width(),
                pred.height(),
                pred.width()
            ));
        }
        let c = self.k + 1;
        for (&g, &p) in gt.pixels().iter().zip(pred.pixels()) {
            if g == VOID {
                continue;
            }
            if g as usize > c || p == VOID || p as usize > c {
                return Err(invalid_err!(
                    "labels ({g}, {p}) outside 1..={c} at a counted pixel"
                ));
            }
            self.counts[(g as usize - 1) * c + (p as usize - 1)] += 1;
        }
        Ok(())
    }

    /// IoU per class id `1..=K+1`; `None` for classes absent from both sides.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let c = self.k + 1;
        (0..c)
            .map(|ci| {
                let tp = self.counts[ci * c + ci];
                let gt_total: u64 = (0..c).map(|j| self.counts[ci * c + j]).sum();
                let pred_total: u64 = (0..c).map(|j| self.counts[j * c + ci]).sum();
                let union = gt_total + pred_total - tp;
                if union == 0 {
                    None
                } else {
                    Some(tp as f64 / union as f64)
                }
            })
            .collect()
    }
}

/// Means over the defined entries of `per_class` (length `K+1`): all classes,
/// then known classes only. `None` when no class in the group is defined.
pub fn aggregate_iou(per_class: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    fn mean(vals: &[Option<f64>]) -> Option<f64> {
        let present: Vec<f64> = vals.iter().flatten().copied().collect();
        if present.is_empty() {
            None
        } else {
            Some(present.iter().sum::<f64>() / present.len() as f64)
        }
    }
    let k = per_class.len().saturating_sub(1);
    (mean(per_class), mean(&per_class[..k]))
}

/// Pixel-level summary: per-class IoU plus the two means.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub k: usize,
    pub per_class: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub miou_star: Option<f64>,
}

pub fn iou_report(acc: &ConfusionAccumulator) -> MetricReport {
    let per_class = acc.per_class_iou();
    let (miou, miou_star) = aggregate_iou(&per_class);
    MetricReport {
        k: acc.k,
        per_class,
        miou,
        miou_star,
    }
}

impl MetricReport {
    /// IoU of the unknown class `K+1`.
    pub fn unknown_iou(&self) -> Option<f64> {
        self.per_class[self.k]
    }
}

/// Image-level unknown detection: an image is predicted positive when the
/// number of its pixels predicted unknown exceeds `tau · total_pixels`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageLevelReport {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when positives exist but none were predicted, making precision an
    /// 0/0 that is reported as 0.0.
    pub precision_undefined: bool,
}

/// `images` pairs ground-truth "contains unknown" with the count of pixels
/// predicted unknown; `total_pixels` is the per-image pixel count.
pub fn image_level_report(
    images: &[(bool, usize)],
    total_pixels: usize,
    tau: f64,
) -> Result<ImageLevelReport> {
    if images.is_empty() {
        return Err(invalid_err!("no images to score"));
    }
    if total_pixels == 0 {
        return Err(invalid_err!("zero pixels per image"));
    }
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(invalid_err!("tau must be nonnegative"));
    }
    let threshold = tau * total_pixels as f64;
    let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for &(has_unknown, predicted_pixels) in images {
        let predicted = predicted_pixels as f64 > threshold;
        match (has_unknown, predicted) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fn_ += 1,
        }
    }
    let n = (tp + fp + tn + fn_) as f64;
    let accuracy = (tp + tn) as f64 / n;
    let mut precision_undefined = false;
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else if fn_ == 0 {
        // Nothing predicted and nothing to find: vacuously perfect.
        1.0
    } else {
        precision_undefined = true;
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        1.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ImageLevelReport {
        tp,
        fp,
        tn,
        fn_,
        accuracy,
        precision,
        recall,
        f1,
        precision_undefined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, v: &[u8]) -> LabelMap {
        LabelMap::from_vec(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn confusion_counts_match_hand_enumeration() {
        // K = 2: classes 1, 2, unknown 3. One 2x3 image.
        let gt = map(2, 3, &[1, 1, 2, 2, 3, 0]);
        let pr = map(2, 3, &[1, 2, 2, 2, 1, 3]);
        let mut acc = ConfusionAccumulator::new(2);
        acc.add(&gt, &pr).unwrap();

        // Manual tally (void pixel skipped): (1,1)=1 (1,2)=1 (2,2)=2 (3,1)=1.
        assert_eq!(acc.count(1, 1), 1);
        assert_eq!(acc.count(1, 2), 1);
        assert_eq!(acc.count(2, 2), 2);
        assert_eq!(acc.count(3, 1), 1);
        assert_eq!(acc.total(), 5);

        let iou = acc.per_class_iou();
        // class 1: tp=1, fp=1 (gt 3 → pred 1), fn=1 → 1/3
        assert!((iou[0].unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // class 2: tp=2, fp=1, fn=0 → 2/3
        assert!((iou[1].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        // unknown: tp=0, present in gt and pred → Some(0.0)
        assert_eq!(iou[2], Some(0.0));
    }

    #[test]
    fn absent_classes_are_excluded_from_means() {
        // K = 3: class 3 and unknown 4 appear nowhere.
        let gt = map(1, 4, &[1, 1, 2, 2]);
        let pr = map(1, 4, &[1, 2, 2, 2]);
        let mut acc = ConfusionAccumulator::new(3);
        acc.add(&gt, &pr).unwrap();
        let report = iou_report(&acc);
        assert_eq!(report.per_class[2], None);
        assert_eq!(report.per_class[3], None);
        let c1 = 1.0 / 2.0; // tp=1 fp=0 fn=1
        let c2 = 2.0 / 3.0; // tp=2 fp=1 fn=0
        assert!((report.miou.unwrap() - (c1 + c2) / 2.0).abs() < 1e-15);
        assert!((report.miou_star.unwrap() - (c1 + c2) / 2.0).abs() < 1e-15);
        assert_eq!(report.unknown_iou(), None);
    }

    #[test]
    fn invalid_labels_are_rejected() {
        let gt = map(1, 2, &[1, 4]);
        let pr = map(1, 2, &[1, 1]);
        let mut acc = ConfusionAccumulator::new(2);
        assert!(acc.add(&gt, &pr).is_err());

        // Void predictions at counted pixels are invalid too.
        let gt = map(1, 1, &[1]);
        let pr = map(1, 1, &[0]);
        let mut acc = ConfusionAccumulator::new(2);
        assert!(acc.add(&gt, &pr).is_err());
    }

    #[test]
    fn reference_fourteen_class_row_reproduces_to_one_decimal() {
        // 13 known classes + unknown, a pinned reference row of per-class fractions.
        let per: Vec<Option<f64>> = [
            85.0, 42.2, 79.4, 0.0, 26.5, 1.4, 82.1, 73.9, 46.0, 14.8, 78.1, 10.2, 42.1, 4.0,
        ]
        .iter()
        .map(|v| Some(v / 100.0))
        .collect();
        let (miou, miou_star) = aggregate_iou(&per);
        assert_eq!(format!("{:.1}", miou.unwrap() * 100.0), "41.8");
        assert_eq!(format!("{:.1}", miou_star.unwrap() * 100.0), "44.7");
    }

    #[test]
    fn image_level_all_positive_predictor_matches_reference_row() {
        // 15 images, 10 actually containing unknown; every image predicted
        // positive: accuracy 10/15, precision 10/15, recall 1, F1 0.8.
        let mut items = Vec::new();
        for i in 0..15 {
            items.push((i < 10, 1000usize));
        }
        let r = image_level_report(&items, 1024, DEFAULT_TAU_IMG).unwrap();
        assert_eq!((r.tp, r.fp, r.tn, r.fn_), (10, 5, 0, 0));
        assert_eq!(format!("{:.1}", r.accuracy * 100.0), "66.7");
        assert_eq!(format!("{:.1}", r.precision * 100.0), "66.7");
        assert_eq!(format!("{:.1}", r.recall * 100.0), "100.0");
        assert_eq!(format!("{:.1}", r.f1 * 100.0), "80.0");
        // F1 is the harmonic mean whenever both parts are defined.
        let hm = 2.0 * r.precision * r.recall / (r.precision + r.recall);
        assert!((r.f1 - hm).abs() < 1e-12);
    }

    #[test]
    fn image_threshold_is_strictly_greater_than() {
        // tau=0 means "any unknown pixel at all": count 0 is negative.
        let r = image_level_report(&[(false, 0), (true, 1)], 100, 0.0).unwrap();
        assert_eq!((r.tp, r.fp, r.tn, r.fn_), (1, 0, 1, 0));
        // Exactly at the threshold stays negative.
        let r = image_level_report(&[(true, 1)], 1000, 0.001).unwrap();
        assert_eq!(r.fn_, 1);
        let r = image_level_report(&[(true, 2)], 1000, 0.001).unwrap();
        assert_eq!(r.tp, 1);
    }

    #[test]
    fn precision_edge_cases() {
        // No positives anywhere: vacuous perfection.
        let r = image_level_report(&[(false, 0), (false, 0)], 10, 0.1).unwrap();
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 1.0);
        assert!(!r.precision_undefined);

        // Positives exist but none predicted: flagged zero.
        let r = image_level_report(&[(true, 0), (false, 0)], 10, 0.1).unwrap();
        assert_eq!(r.precision, 0.0);
        assert!(r.precision_undefined);
        assert_eq!(r.recall, 0.0);
        assert_eq!(r.f1, 0.0);
    }
}
