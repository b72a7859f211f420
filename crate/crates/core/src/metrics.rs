//! Evaluation metrics: box coverage, IoU against the outer conformal box,
//! interval score, recovery rate, class-frequency aggregation and the paired
//! t-test used to compare methods run on identical splits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::model::{BoundingBox, ConformalBox, DetectionRecord, Interval, N_CORNERS};

/// Metrics of one evaluation pass.
///
/// `interval_score` is the total over evaluation records of the box-level
/// score (sum over the four corners), so class-wise totals add up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub coverage: f64,
    pub corner_coverage: [f64; 4],
    pub mean_iou: f64,
    pub interval_score: f64,
    pub mean_set_size: Option<f64>,
    pub class_coverage: Option<f64>,
    pub joint_coverage: Option<f64>,
    pub n_eval: usize,
}

/// Per-corner membership `c in [low, high]` (inclusive) and their conjunction.
pub fn corner_coverage_event(gt_box: &BoundingBox, intervals: &[Interval; 4]) -> ([bool; 4], bool) {
    let gt = gt_box.corners();
    let hits: [bool; 4] = std::array::from_fn(|c| intervals[c].contains(gt[c]));
    (hits, hits.iter().all(|&h| h))
}

/// Intersection over union; 0 when the union has zero area.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Interval score: width plus `2 / alpha` times the distance by which `c`
/// falls outside `[low, high]`.
pub fn interval_score(low: f64, high: f64, c: f64, alpha: f64) -> f64 {
    let mut s = high - low;
    if c < low {
        s += 2.0 / alpha * (low - c);
    }
    if c > high {
        s += 2.0 / alpha * (c - high);
    }
    s
}

/// Sum of the corner interval scores of one box.
pub fn box_interval_score(intervals: &[Interval; 4], gt_box: &BoundingBox, alpha: f64) -> f64 {
    let gt = gt_box.corners();
    (0..N_CORNERS)
        .map(|c| interval_score(intervals[c].low, intervals[c].high, gt[c], alpha))
        .sum()
}

/// Among records whose prediction has IoU below `iou_threshold` with the
/// ground truth, the fraction whose ground truth lies inside the outer
/// conformal box. `None` when no record is below the threshold.
pub fn recovery_rate(
    records: &[DetectionRecord],
    boxes: &[ConformalBox],
    iou_threshold: f64,
) -> Option<f64> {
    let (mut below, mut recovered) = (0usize, 0usize);
    for (r, b) in records.iter().zip(boxes) {
        if iou(&r.pred_box, &r.gt_box) < iou_threshold {
            below += 1;
            if b.outer.contains(&r.gt_box) {
                recovered += 1;
            }
        }
    }
    (below > 0).then(|| recovered as f64 / below as f64)
}

/// Streaming accumulator behind [`MetricRow`]. Partial accumulators merge,
/// so records can be processed in chunks.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    n: usize,
    covered: usize,
    corner_covered: [usize; 4],
    iou_sum: f64,
    score_sum: f64,
    n_sets: usize,
    set_size_sum: usize,
    class_covered: usize,
    joint_covered: usize,
}

impl MetricAccumulator {
    /// Adds one evaluation record. `set` carries the class prediction set
    /// size and whether it contains the true class, for two-step runs.
    pub fn add(&mut self, gt_box: &BoundingBox, cbox: &ConformalBox, alpha: f64, set: Option<(usize, bool)>) {
        let (hits, all) = corner_coverage_event(gt_box, &cbox.intervals);
        self.n += 1;
        self.covered += usize::from(all);
        for (acc, h) in self.corner_covered.iter_mut().zip(hits) {
            *acc += usize::from(h);
        }
        self.iou_sum += iou(gt_box, &cbox.outer);
        self.score_sum += box_interval_score(&cbox.intervals, gt_box, alpha);
        if let Some((size, class_hit)) = set {
            self.n_sets += 1;
            self.set_size_sum += size;
            self.class_covered += usize::from(class_hit);
            self.joint_covered += usize::from(class_hit && all);
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.n += other.n;
        self.covered += other.covered;
        for c in 0..N_CORNERS {
            self.corner_covered[c] += other.corner_covered[c];
        }
        self.iou_sum += other.iou_sum;
        self.score_sum += other.score_sum;
        self.n_sets += other.n_sets;
        self.set_size_sum += other.set_size_sum;
        self.class_covered += other.class_covered;
        self.joint_covered += other.joint_covered;
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn finish(&self) -> MetricRow {
        let n = self.n.max(1) as f64;
        let sets = (self.n_sets > 0).then_some(self.n_sets as f64);
        MetricRow {
            coverage: self.covered as f64 / n,
            corner_coverage: std::array::from_fn(|c| self.corner_covered[c] as f64 / n),
            mean_iou: self.iou_sum / n,
            interval_score: self.score_sum,
            mean_set_size: sets.map(|m| self.set_size_sum as f64 / m),
            class_coverage: sets.map(|m| self.class_covered as f64 / m),
            joint_coverage: sets.map(|m| self.joint_covered as f64 / m),
            n_eval: self.n,
        }
    }
}

fn weighted_opt(rows: &[(&MetricRow, f64)], pick: impl Fn(&MetricRow) -> Option<f64>) -> Option<f64> {
    rows.iter()
        .map(|(r, w)| pick(r).map(|v| v * w))
        .sum::<Option<f64>>()
}

/// Combines per-class rows: coverage-type metrics and IoU are weighted by
/// class frequency, interval scores are summed.
pub fn classwise_aggregate(
    per_class: &BTreeMap<usize, MetricRow>,
    class_counts: &BTreeMap<usize, usize>,
) -> Result<MetricRow> {
    if per_class.is_empty() || !per_class.keys().eq(class_counts.keys()) {
        return Err(Error::MismatchedKeys);
    }
    let total: usize = class_counts.values().sum();
    if total == 0 || class_counts.values().any(|&c| c == 0) {
        return Err(Error::InvalidConfig("class counts must be positive".into()));
    }
    let rows: Vec<(&MetricRow, f64)> = per_class
        .iter()
        .map(|(k, r)| (r, class_counts[k] as f64 / total as f64))
        .collect();
    let wsum = |pick: &dyn Fn(&MetricRow) -> f64| rows.iter().map(|(r, w)| pick(r) * w).sum::<f64>();
    Ok(MetricRow {
        coverage: wsum(&|r| r.coverage),
        corner_coverage: std::array::from_fn(|c| wsum(&|r| r.corner_coverage[c])),
        mean_iou: wsum(&|r| r.mean_iou),
        interval_score: rows.iter().map(|(r, _)| r.interval_score).sum(),
        mean_set_size: weighted_opt(&rows, |r| r.mean_set_size),
        class_coverage: weighted_opt(&rows, |r| r.class_coverage),
        joint_coverage: weighted_opt(&rows, |r| r.joint_coverage),
        n_eval: rows.iter().map(|(r, _)| r.n_eval).sum(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    pub p: f64,
}

/// Two-sided tail probability `P(|T| >= |t|)` of Student's t with `df`
/// degrees of freedom, via the regularized incomplete beta function.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t))
}

/// Two-sided paired t-test of `a - b` against zero mean difference.
///
/// With zero spread in the differences the statistic is undefined; the
/// result is then `p = 1` for a zero mean and `p = 0` otherwise.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::TooFewPairs(n));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if sd == 0.0 {
        let (t, p) = if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(mean), 0.0)
        };
        return Ok(TTestResult { n, mean_diff: mean, t, p });
    }
    let t = mean / (sd / (n as f64).sqrt());
    Ok(TTestResult {
        n,
        mean_diff: mean,
        t,
        p: student_t_two_sided_p(t, (n - 1) as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regression::{build_conformal_box, DEFAULT_IMAGE_BOUNDS};
    use proptest::prelude::*;

    fn iv(pairs: [(f64, f64); 4]) -> [Interval; 4] {
        pairs.map(|(low, high)| Interval { low, high })
    }

    #[test]
    fn coverage_event_examples() {
        let gt = BoundingBox::new(1.0, 1.0, 9.0, 9.0);
        let (hits, all) = corner_coverage_event(&gt, &iv([(0.0, 2.0), (0.0, 2.0), (8.0, 10.0), (0.0, 8.0)]));
        assert_eq!(hits, [true, true, true, false]);
        assert!(!all);
        // endpoints are inclusive
        let (_, all) = corner_coverage_event(&gt, &iv([(1.0, 1.0), (1.0, 2.0), (0.0, 9.0), (9.0, 9.0)]));
        assert!(all);
        let pred = BoundingBox::new(10.0, 10.0, 20.0, 20.0);
        let b = build_conformal_box(&pred, None, &[f64::INFINITY; 4], &DEFAULT_IMAGE_BOUNDS).unwrap();
        assert!(corner_coverage_event(&gt, &b.intervals).1);
    }

    #[test]
    fn iou_examples() {
        let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = BoundingBox::new(1.0, 1.0, 3.0, 3.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou(&a, &BoundingBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        let z = BoundingBox::new(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&z, &z), 0.0);
    }

    #[test]
    fn interval_score_examples() {
        assert_eq!(interval_score(0.0, 10.0, 5.0, 0.1), 10.0);
        assert!((interval_score(0.0, 10.0, 12.0, 0.1) - 50.0).abs() < 1e-12);
        assert!((interval_score(0.0, 10.0, -1.0, 0.1) - 30.0).abs() < 1e-12);
    }

    fn rec(pred: [f64; 4], gt: [f64; 4]) -> DetectionRecord {
        DetectionRecord {
            image_id: String::new(),
            pred_box: pred.into(),
            gt_box: gt.into(),
            gt_class: 0,
            class_probs: vec![1.0],
            sigma: [1.0; 4],
        }
    }

    #[test]
    fn recovery_examples() {
        let records = vec![
            rec([0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 10.0]),
            rec([0.0, 0.0, 10.0, 10.0], [5.0, 5.0, 15.0, 15.0]),
            rec([0.0, 0.0, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0]),
        ];
        let boxes: Vec<_> = [3.0, 6.0, 6.0]
            .iter()
            .zip(&records)
            .map(|(&q, r)| build_conformal_box(&r.pred_box, None, &[q; 4], &DEFAULT_IMAGE_BOUNDS).unwrap())
            .collect();
        assert_eq!(recovery_rate(&records, &boxes, 0.5), Some(0.5));

        let whole: Vec<_> = records
            .iter()
            .map(|r| build_conformal_box(&r.pred_box, None, &[f64::INFINITY; 4], &DEFAULT_IMAGE_BOUNDS).unwrap())
            .collect();
        assert_eq!(recovery_rate(&records, &whole, 0.5), Some(1.0));

        let zero: Vec<_> = records
            .iter()
            .map(|r| build_conformal_box(&r.pred_box, None, &[0.0; 4], &DEFAULT_IMAGE_BOUNDS).unwrap())
            .collect();
        assert_eq!(recovery_rate(&records[1..], &zero[1..], 1.0), Some(0.0));
        assert_eq!(recovery_rate(&records[..1], &zero[..1], 0.5), None);
    }

    fn row(coverage: f64, score: f64, n: usize) -> MetricRow {
        MetricRow {
            coverage,
            corner_coverage: [coverage; 4],
            mean_iou: coverage / 2.0,
            interval_score: score,
            mean_set_size: None,
            class_coverage: None,
            joint_coverage: None,
            n_eval: n,
        }
    }

    #[test]
    fn aggregate_examples() {
        let one = BTreeMap::from([(0, row(0.7, 10.0, 5))]);
        assert_eq!(classwise_aggregate(&one, &BTreeMap::from([(0, 5)])).unwrap(), one[&0]);

        let two = BTreeMap::from([(0, row(1.0, 100.0, 1)), (1, row(0.0, 200.0, 3))]);
        let agg = classwise_aggregate(&two, &BTreeMap::from([(0, 1), (1, 3)])).unwrap();
        assert!((agg.coverage - 0.25).abs() < 1e-15);
        assert_eq!(agg.interval_score, 300.0);
        assert_eq!(agg.n_eval, 4);
        assert_eq!(agg.mean_set_size, None);

        let agg = classwise_aggregate(&two, &BTreeMap::from([(0, 10), (1, 1)])).unwrap();
        assert_eq!(agg.interval_score, 300.0);

        assert!(matches!(
            classwise_aggregate(&two, &BTreeMap::from([(0, 1), (2, 3)])),
            Err(Error::MismatchedKeys)
        ));
    }

    #[test]
    fn t_test_degenerate_rules() {
        let a = [1.0, 2.0, 3.0];
        let r = paired_t_test(&a, &a).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        let r = paired_t_test(&[2.0; 4], &[1.0; 4]).unwrap();
        assert_eq!(r.p, 0.0);
        assert!(matches!(paired_t_test(&a, &a[..2]), Err(Error::LengthMismatch { .. })));
        assert!(matches!(paired_t_test(&a[..1], &a[..1]), Err(Error::TooFewPairs(1))));
    }

    #[test]
    fn t_test_closed_form_two_df() {
        let r = paired_t_test(&[1.0, 2.0, 3.0], &[0.0; 3]).unwrap();
        assert!((r.t - 12f64.sqrt()).abs() < 1e-12);
        // two degrees of freedom: p = 1 - t / sqrt(t^2 + 2)
        let expected = 1.0 - r.t / (r.t * r.t + 2.0).sqrt();
        assert!((r.p - expected).abs() < 1e-12);
        assert!((r.p - 0.0742).abs() < 1e-4);
    }

    #[test]
    fn t_tail_closed_form_one_df() {
        // Cauchy: P(|T| >= t) = 1 - 2 atan(t) / pi
        for t in [0.0, 0.3, 1.0, 4.0, 10.0] {
            let want = 1.0 - 2.0 * f64::atan(t) / std::f64::consts::PI;
            assert!((student_t_two_sided_p(t, 1.0) - want).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(
            a in prop::array::uniform4(0.0f64..50.0),
            b in prop::array::uniform4(0.0f64..50.0),
        ) {
            let mk = |c: [f64; 4]| BoundingBox::new(c[0].min(c[2]), c[1].min(c[3]), c[0].max(c[2]), c[1].max(c[3]));
            let (a, b) = (mk(a), mk(b));
            let v = iou(&a, &b);
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            if a.area() > 0.0 {
                prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
            }
            if a.area() > 0.0 && b.area() > 0.0 && (v - 1.0).abs() < 1e-15 {
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn t_test_antisymmetric(
            pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..30),
        ) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let ab = paired_t_test(&a, &b).unwrap();
            let ba = paired_t_test(&b, &a).unwrap();
            prop_assert!((ab.t + ba.t).abs() < 1e-9 * ab.t.abs().max(1.0));
            prop_assert!((ab.p - ba.p).abs() < 1e-12);
        }

        #[test]
        fn box_event_matches_outer_containment_without_inner(
            pred in prop::array::uniform4(0.0f64..100.0),
            gt in prop::array::uniform4(0.0f64..100.0),
            q in prop::array::uniform4(0.0f64..80.0),
        ) {
            let mk = |c: [f64; 4]| BoundingBox::new(c[0].min(c[2]), c[1].min(c[3]), c[0].max(c[2]), c[1].max(c[3]));
            let (pred, gt) = (mk(pred), mk(gt));
            let b = build_conformal_box(&pred, None, &q, &DEFAULT_IMAGE_BOUNDS).unwrap();
            let (hits, all) = corner_coverage_event(&gt, &b.intervals);
            // recomputing membership from the assembled box gives the same events
            let lows = [b.intervals[0].low, b.intervals[1].low, b.intervals[2].low, b.intervals[3].low];
            let g = gt.corners();
            for c in 0..4 {
                prop_assert_eq!(hits[c], lows[c] <= g[c] && g[c] <= b.intervals[c].high);
            }
            if all {
                prop_assert!(b.outer.contains(&gt));
            }
        }
    }
}
