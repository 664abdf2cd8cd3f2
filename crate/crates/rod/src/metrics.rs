//! Segmentation metrics over binary freespace masks.
//!
//! Everything reduces to exact integer confusion counts (freespace = positive
//! class), aggregated globally across the evaluated pixels before any ratio
//! is formed. Degenerate denominators follow a documented convention:
//! a metric whose denominator is empty (no positives anywhere, none
//! predicted) is 1.0, so correct all-negative behavior scores perfectly.

use std::fmt;
use std::ops::Add;

use ndarray::Array2;

use crate::error::{Result, RodError};
use crate::model::Model;
use crate::tensor::Elem;
use crate::training::SampleSource;

/// Pixel tallies with freespace (mask value 1) as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn new(true_pos: u64, false_pos: u64, false_neg: u64, true_neg: u64) -> Self {
        ConfusionCounts {
            true_pos,
            false_pos,
            false_neg,
            true_neg,
        }
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, rhs: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            true_pos: self.true_pos + rhs.true_pos,
            false_pos: self.false_pos + rhs.false_pos,
            false_neg: self.false_neg + rhs.false_neg,
            true_neg: self.true_neg + rhs.true_neg,
        }
    }
}

/// Exact per-pixel confusion tallies of a prediction against ground truth.
pub fn confusion_counts(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<ConfusionCounts> {
    if pred.dim() != gt.dim() {
        return Err(RodError::shape(
            "confusion_counts",
            format!("{:?}", gt.dim()),
            format!("{:?}", pred.dim()),
        ));
    }
    let mut counts = ConfusionCounts::default();
    for (p, g) in pred.iter().zip(gt.iter()) {
        match (p, g) {
            (1, 1) => counts.true_pos += 1,
            (1, 0) => counts.false_pos += 1,
            (0, 1) => counts.false_neg += 1,
            (0, 0) => counts.true_neg += 1,
            _ => {
                return Err(RodError::Data(format!(
                    "non-binary mask value (pred {p}, gt {g})"
                )))
            }
        }
    }
    Ok(counts)
}

/// Accuracy, precision, recall, F1 and IoU derived from one set of counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub counts: ConfusionCounts,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "accuracy,precision,recall,f1,iou,tp,fp,fn,tn";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
            self.accuracy,
            self.precision,
            self.recall,
            self.f1,
            self.iou,
            self.counts.true_pos,
            self.counts.false_pos,
            self.counts.false_neg,
            self.counts.true_neg
        )
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "metric     value")?;
        writeln!(f, "---------  --------")?;
        writeln!(f, "accuracy   {:.6}", self.accuracy)?;
        writeln!(f, "precision  {:.6}", self.precision)?;
        writeln!(f, "recall     {:.6}", self.recall)?;
        writeln!(f, "f1         {:.6}", self.f1)?;
        writeln!(f, "iou        {:.6}", self.iou)?;
        write!(
            f,
            "counts     tp={} fp={} fn={} tn={}",
            self.counts.true_pos, self.counts.false_pos, self.counts.false_neg, self.counts.true_neg
        )
    }
}

/// Derives the metric set from confusion counts.
pub fn compute_metrics(counts: &ConfusionCounts) -> Result<MetricReport> {
    let total = counts.total();
    if total == 0 {
        return Err(RodError::Data("compute_metrics: zero pixels evaluated".into()));
    }
    let tp = counts.true_pos as f64;
    let ratio = |num: f64, den: u64| if den == 0 { 1.0 } else { num / den as f64 };
    let accuracy = (counts.true_pos + counts.true_neg) as f64 / total as f64;
    let precision = ratio(tp, counts.true_pos + counts.false_pos);
    let recall = ratio(tp, counts.true_pos + counts.false_neg);
    let union = counts.true_pos + counts.false_pos + counts.false_neg;
    let iou = ratio(tp, union);
    let f1 = if union == 0 {
        1.0
    } else if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MetricReport {
        accuracy,
        precision,
        recall,
        f1,
        iou,
        counts: *counts,
    })
}

/// Dataset evaluation result: globally aggregated metrics plus any samples
/// that failed to evaluate (recorded and skipped).
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricReport,
    pub failures: Vec<(usize, String)>,
    pub evaluated: usize,
}

/// Predicts every sample at its ground-truth resolution, accumulates one
/// global confusion count across all pixels and computes the metrics once.
pub fn evaluate_dataset<T: Elem, S: SampleSource<T>>(
    model: &Model<T>,
    source: &S,
) -> Result<EvalOutcome> {
    if source.is_empty() {
        return Err(RodError::Data("evaluation dataset is empty".into()));
    }
    let mut counts = ConfusionCounts::default();
    let mut failures = Vec::new();
    let mut evaluated = 0usize;
    for i in 0..source.len() {
        match evaluate_one(model, source, i) {
            Ok(c) => {
                counts = counts + c;
                evaluated += 1;
            }
            Err(e) => {
                log::warn!("sample {i} failed: {e}");
                failures.push((i, e.to_string()));
            }
        }
    }
    let report = compute_metrics(&counts)?;
    Ok(EvalOutcome {
        report,
        failures,
        evaluated,
    })
}

fn evaluate_one<T: Elem, S: SampleSource<T>>(
    model: &Model<T>,
    source: &S,
    index: usize,
) -> Result<ConfusionCounts> {
    let (image, gt) = source.get(index)?;
    let (h, w) = gt.dim();
    let batched = image.insert_axis(ndarray::Axis(0));
    let pred = model.predict_mask(&batched, (h, w))?;
    confusion_counts(&pred.index_axis(ndarray::Axis(0), 0).to_owned(), &gt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn all_ones_prediction_is_pure_true_positive() {
        let pred = Array2::from_elem((2, 5), 1u8);
        let gt = pred.clone();
        let c = confusion_counts(&pred, &gt).unwrap();
        assert_eq!(c, ConfusionCounts::new(10, 0, 0, 0));
    }

    #[test]
    fn complement_prediction_has_no_correct_pixels() {
        let gt = Array2::from_shape_fn((3, 3), |(y, x)| u8::from((y + x) % 2 == 0));
        let pred = gt.mapv(|v| 1 - v);
        let c = confusion_counts(&pred, &gt).unwrap();
        assert_eq!(c.true_pos, 0);
        assert_eq!(c.true_neg, 0);
        assert_eq!(c.total(), 9);
    }

    #[test]
    fn counts_match_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let pred = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0..2u8));
            let gt = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0..2u8));
            let got = confusion_counts(&pred, &gt).unwrap();
            let (mut tp, mut fp, mut fng, mut tn) = (0u64, 0u64, 0u64, 0u64);
            for y in 0..4 {
                for x in 0..4 {
                    match (pred[[y, x]], gt[[y, x]]) {
                        (1, 1) => tp += 1,
                        (1, 0) => fp += 1,
                        (0, 1) => fng += 1,
                        _ => tn += 1,
                    }
                }
            }
            assert_eq!(got, ConfusionCounts::new(tp, fp, fng, tn));
        }
    }

    #[test]
    fn non_binary_values_are_rejected() {
        let pred = Array2::from_elem((1, 1), 2u8);
        let gt = Array2::from_elem((1, 1), 1u8);
        assert!(confusion_counts(&pred, &gt).is_err());
        let a = Array2::from_elem((1, 2), 1u8);
        let b = Array2::from_elem((2, 1), 1u8);
        assert!(confusion_counts(&a, &b).is_err(), "shape mismatch");
    }

    #[test]
    fn hand_enumerated_confusion_arithmetic() {
        let c = ConfusionCounts::new(3, 1, 1, 5);
        let m = compute_metrics(&c).unwrap();
        assert_eq!(m.accuracy, 0.8);
        assert_eq!(m.precision, 0.75);
        assert_eq!(m.recall, 0.75);
        assert_eq!(m.f1, 0.75);
        assert_eq!(m.iou, 0.6);
    }

    #[test]
    fn perfect_prediction_scores_one_everywhere() {
        let m = compute_metrics(&ConfusionCounts::new(7, 0, 0, 3)).unwrap();
        for v in [m.accuracy, m.precision, m.recall, m.f1, m.iou] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn all_negative_convention_scores_one() {
        let m = compute_metrics(&ConfusionCounts::new(0, 0, 0, 12)).unwrap();
        for v in [m.accuracy, m.precision, m.recall, m.f1, m.iou] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn zero_total_is_an_error() {
        assert!(compute_metrics(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn f1_equals_two_iou_over_one_plus_iou() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10_000 {
            let c = ConfusionCounts::new(
                rng.gen_range(0..100),
                rng.gen_range(0..100),
                rng.gen_range(0..100),
                rng.gen_range(0..100),
            );
            if c.total() == 0 {
                continue;
            }
            let m = compute_metrics(&c).unwrap();
            if c.true_pos + c.false_pos + c.false_neg > 0 {
                let want = 2.0 * m.iou / (1.0 + m.iou);
                assert!((m.f1 - want).abs() < 1e-12, "{c:?}");
                assert!(m.iou <= m.f1 + 1e-15, "iou ≤ f1 for {c:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn metrics_stay_in_unit_interval(tp in 0u64..1000, fp in 0u64..1000, fng in 0u64..1000, tn in 0u64..1000) {
            let c = ConfusionCounts::new(tp, fp, fng, tn);
            prop_assume!(c.total() > 0);
            let m = compute_metrics(&c).unwrap();
            for v in [m.accuracy, m.precision, m.recall, m.f1, m.iou] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if m.precision > 0.0 && m.recall > 0.0 {
                let harmonic = 2.0 * m.precision * m.recall / (m.precision + m.recall);
                prop_assert!((m.f1 - harmonic).abs() < 1e-12);
            }
        }

        #[test]
        fn swapping_pred_and_gt_swaps_precision_and_recall(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred = Array2::from_shape_fn((6, 6), |_| rng.gen_range(0..2u8));
            let gt = Array2::from_shape_fn((6, 6), |_| rng.gen_range(0..2u8));
            let a = compute_metrics(&confusion_counts(&pred, &gt).unwrap()).unwrap();
            let b = compute_metrics(&confusion_counts(&gt, &pred).unwrap()).unwrap();
            prop_assert_eq!(a.accuracy, b.accuracy);
            prop_assert_eq!(a.precision, b.recall);
            prop_assert_eq!(a.recall, b.precision);
        }
    }

    #[test]
    fn global_counts_are_sums_of_per_image_counts() {
        let a = ConfusionCounts::new(1, 0, 0, 3);
        let b = ConfusionCounts::new(0, 1, 1, 2);
        let g = a + b;
        assert_eq!(g, ConfusionCounts::new(1, 1, 1, 5));
        let m = compute_metrics(&g).unwrap();
        assert!((m.iou - 1.0 / 3.0).abs() < 1e-15);
    }
}
