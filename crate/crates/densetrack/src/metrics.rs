//! Tracking metrics at the 256×256 measurement convention.
//!
//! Positions are rescaled by (256/W, 256/H) before any threshold test.
//! δ_k is the percentage of ground-truth-visible points within k pixels;
//! δ_avg averages k ∈ {1,2,4,8,16}. Occlusion accuracy compares the
//! thresholded visibility bit. Average Jaccard combines both: per k,
//! TP/(TP+FP+FN) over visibility-and-position correctness, averaged.

use serde::Serialize;

pub const DELTA_THRESHOLDS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];
pub const EVAL_RESOLUTION: f64 = 256.0;
pub const VIS_THRESHOLD: f64 = 0.5;

/// One (point, frame) measurement, already rescaled to 256×256.
#[derive(Clone, Copy, Debug)]
pub struct EvalRecord {
    pub pred: (f64, f64),
    pub pred_visible: bool,
    pub gt: (f64, f64),
    pub gt_visible: bool,
    pub valid: bool,
}

impl EvalRecord {
    /// Build from source-resolution coordinates and a visibility
    /// probability (thresholded at 0.5).
    pub fn from_source(
        pred: (f64, f64),
        pred_vis_prob: f64,
        gt: (f64, f64),
        gt_visible: bool,
        valid: bool,
        source_wh: (usize, usize),
    ) -> Self {
        let sx = EVAL_RESOLUTION / source_wh.0 as f64;
        let sy = EVAL_RESOLUTION / source_wh.1 as f64;
        EvalRecord {
            pred: (pred.0 * sx, pred.1 * sy),
            pred_visible: pred_vis_prob >= VIS_THRESHOLD,
            gt: (gt.0 * sx, gt.1 * sy),
            gt_visible,
            valid,
        }
    }

    fn err(&self) -> f64 {
        let dx = self.pred.0 - self.gt.0;
        let dy = self.pred.1 - self.gt.1;
        (dx * dx + dy * dy).sqrt()
    }

    fn within(&self, k: f64) -> bool {
        self.err() < k
    }
}

/// Percentage of gt-visible valid points within k pixels; absent when the
/// set has no such points.
pub fn delta_k(records: &[EvalRecord], k: f64) -> Option<f64> {
    assert!(k > 0.0, "delta_k threshold must be positive");
    let mut total = 0usize;
    let mut hit = 0usize;
    for r in records {
        if r.valid && r.gt_visible {
            total += 1;
            if r.within(k) {
                hit += 1;
            }
        }
    }
    (total > 0).then(|| 100.0 * hit as f64 / total as f64)
}

/// Unweighted mean of δ_k over the five standard thresholds.
pub fn delta_avg(records: &[EvalRecord]) -> Option<f64> {
    let mut acc = 0.0;
    for k in DELTA_THRESHOLDS {
        acc += delta_k(records, k)?;
    }
    Some(acc / DELTA_THRESHOLDS.len() as f64)
}

/// Percentage of valid points whose predicted visibility bit matches.
pub fn occlusion_accuracy(records: &[EvalRecord]) -> Option<f64> {
    let mut total = 0usize;
    let mut hit = 0usize;
    for r in records {
        if r.valid {
            total += 1;
            if r.pred_visible == r.gt_visible {
                hit += 1;
            }
        }
    }
    (total > 0).then(|| 100.0 * hit as f64 / total as f64)
}

/// Average Jaccard: for each threshold k,
///   TP = gt-visible, predicted visible, within k
///   FP = predicted visible but gt-occluded or outside k
///   FN = gt-visible but predicted occluded or outside k
/// Jaccard_k = TP/(TP+FP+FN); AJ = mean over k × 100.
pub fn average_jaccard(records: &[EvalRecord]) -> Option<f64> {
    let any = records.iter().any(|r| r.valid);
    if !any {
        return None;
    }
    let mut acc = 0.0;
    for k in DELTA_THRESHOLDS {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for r in records {
            if !r.valid {
                continue;
            }
            let within = r.within(k);
            if r.gt_visible && r.pred_visible && within {
                tp += 1;
            } else {
                if r.pred_visible && !(r.gt_visible && within) {
                    fp += 1;
                }
                if r.gt_visible && !(r.pred_visible && within) {
                    fn_ += 1;
                }
            }
        }
        let denom = tp + fp + fn_;
        acc += if denom == 0 { 1.0 } else { tp as f64 / denom as f64 };
    }
    Some(100.0 * acc / DELTA_THRESHOLDS.len() as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub delta_k: Vec<(u32, Option<f64>)>,
    pub delta_avg: Option<f64>,
    pub occlusion_accuracy: Option<f64>,
    pub average_jaccard: Option<f64>,
    pub points: usize,
}

pub fn report(records: &[EvalRecord]) -> MetricsReport {
    MetricsReport {
        delta_k: DELTA_THRESHOLDS
            .iter()
            .map(|&k| (k as u32, delta_k(records, k)))
            .collect(),
        delta_avg: delta_avg(records),
        occlusion_accuracy: occlusion_accuracy(records),
        average_jaccard: average_jaccard(records),
        points: records.iter().filter(|r| r.valid).count(),
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let fmt_opt = |v: Option<f64>| match v {
            Some(v) => format!("{v:6.2}"),
            None => "   n/a".to_string(),
        };
        writeln!(f, "points evaluated: {}", self.points)?;
        for (k, v) in &self.delta_k {
            writeln!(f, "delta_{k:<2}          {}", fmt_opt(*v))?;
        }
        writeln!(f, "delta_avg         {}", fmt_opt(self.delta_avg))?;
        writeln!(f, "occlusion_acc     {}", fmt_opt(self.occlusion_accuracy))?;
        write!(f, "average_jaccard   {}", fmt_opt(self.average_jaccard))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(err: f64, pred_vis: bool, gt_vis: bool) -> EvalRecord {
        EvalRecord {
            pred: (err, 0.0),
            pred_visible: pred_vis,
            gt: (0.0, 0.0),
            gt_visible: gt_vis,
            valid: true,
        }
    }

    #[test]
    fn zero_error_everywhere_is_100() {
        let records: Vec<EvalRecord> = (0..10).map(|_| rec(0.0, true, true)).collect();
        assert_eq!(delta_k(&records, 16.0), Some(100.0));
        assert_eq!(delta_avg(&records), Some(100.0));
        assert_eq!(occlusion_accuracy(&records), Some(100.0));
        assert_eq!(average_jaccard(&records), Some(100.0));
    }

    #[test]
    fn uniform_20px_error_fails_16() {
        let records: Vec<EvalRecord> = (0..5).map(|_| rec(20.0, true, true)).collect();
        assert_eq!(delta_k(&records, 16.0), Some(0.0));
    }

    #[test]
    fn uniform_3px_error_delta_avg_60() {
        let records: Vec<EvalRecord> = (0..7).map(|_| rec(3.0, true, true)).collect();
        // thresholds 1,2 miss; 4,8,16 hit -> (0+0+100+100+100)/5
        assert_eq!(delta_avg(&records), Some(60.0));
    }

    #[test]
    fn occlusion_bits() {
        let perfect: Vec<EvalRecord> =
            vec![rec(0.0, true, true), rec(0.0, false, false)];
        assert_eq!(occlusion_accuracy(&perfect), Some(100.0));
        let inverted: Vec<EvalRecord> =
            vec![rec(0.0, false, true), rec(0.0, true, false)];
        assert_eq!(occlusion_accuracy(&inverted), Some(0.0));
    }

    #[test]
    fn all_predicted_occluded_gives_zero_jaccard() {
        let records: Vec<EvalRecord> = (0..4).map(|_| rec(0.0, false, true)).collect();
        assert_eq!(average_jaccard(&records), Some(0.0));
    }

    #[test]
    fn jaccard_hand_enumerated_four_point_case() {
        // point A: visible, predicted visible, error 0        -> TP at all k
        // point B: visible, predicted visible, error 3        -> TP for k>=4, FP+FN below
        // point C: occluded, predicted visible, error 0       -> FP at all k
        // point D: visible, predicted occluded, error 0       -> FN at all k
        let records = vec![
            rec(0.0, true, true),
            rec(3.0, true, true),
            rec(0.0, true, false),
            rec(0.0, false, true),
        ];
        // k in {1,2}: TP=1, FP=2 (B,C), FN=2 (B,D) -> 1/5
        // k in {4,8,16}: TP=2, FP=1 (C), FN=1 (D) -> 2/4
        let expect = 100.0 * (2.0 * (1.0 / 5.0) + 3.0 * (2.0 / 4.0)) / 5.0;
        let got = average_jaccard(&records).unwrap();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn delta_k_monotone_in_k() {
        let errs = [0.5, 1.5, 3.0, 6.0, 10.0, 20.0, 0.2];
        let records: Vec<EvalRecord> = errs.iter().map(|&e| rec(e, true, true)).collect();
        let mut prev = 0.0;
        for k in DELTA_THRESHOLDS {
            let v = delta_k(&records, k).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn rescale_invariance() {
        let a = EvalRecord::from_source((10.0, 10.0), 1.0, (12.0, 10.0), true, true, (256, 256));
        let b = EvalRecord::from_source((20.0, 20.0), 1.0, (24.0, 20.0), true, true, (512, 512));
        for k in DELTA_THRESHOLDS {
            assert_eq!(a.within(k), b.within(k));
        }
    }

    #[test]
    fn empty_set_reports_absent() {
        let records: Vec<EvalRecord> = vec![];
        assert_eq!(delta_k(&records, 4.0), None);
        assert_eq!(delta_avg(&records), None);
        assert_eq!(average_jaccard(&records), None);
    }

    #[test]
    fn jaccard_bounded_by_recall() {
        // AJ <= mean_k TP/(TP+FN) on any set
        let records = vec![
            rec(0.9, true, true),
            rec(2.5, false, true),
            rec(5.0, true, false),
            rec(1.2, true, true),
            rec(9.0, false, false),
        ];
        let mut recall_acc = 0.0;
        for k in DELTA_THRESHOLDS {
            let (mut tp, mut fn_) = (0, 0);
            for r in &records {
                if r.gt_visible {
                    if r.pred_visible && r.within(k) {
                        tp += 1;
                    } else {
                        fn_ += 1;
                    }
                }
            }
            recall_acc += if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
        }
        let recall_bound = 100.0 * recall_acc / 5.0;
        assert!(average_jaccard(&records).unwrap() <= recall_bound + 1e-9);
    }
}
