//! Split conformal prediction for the box regression head.
//!
//! Each of the four corners is conformalized on its own. Scores are absolute
//! residuals, optionally divided by the predicted per-corner sigma, and the
//! per-corner quantile is the `ceil((n + 1)(1 - alpha))`-th order statistic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    is_x_corner, BoundingBox, ConformalBox, DetectionRecord, Group, GroupQuantiles, Interval,
    QuantileScope, QuantileTable, N_CORNERS,
};

/// Per-corner conformity scores in `(x0, y0, x1, y1)` order.
pub type CornerScores = [f64; 4];

/// Image extent used when an infinite quantile makes a corner interval vacuous.
pub const DEFAULT_IMAGE_BOUNDS: BoundingBox = BoundingBox::new(0.0, 0.0, 10_000.0, 10_000.0);

/// Default minimum calibration records per class before a group is flagged.
pub const DEFAULT_MIN_PER_CLASS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// Scores are absolute residuals; intervals have the same width everywhere.
    #[default]
    Unscaled,
    /// Scores are residuals divided by sigma; intervals scale with sigma.
    Scaled,
}

pub fn score_unscaled(pred_box: &BoundingBox, gt_box: &BoundingBox) -> CornerScores {
    let p = pred_box.corners();
    let g = gt_box.corners();
    std::array::from_fn(|c| (p[c] - g[c]).abs())
}

fn check_sigma(sigma: &[f64; 4]) -> Result<()> {
    for (corner, &value) in sigma.iter().enumerate() {
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::NonPositiveSigma { corner, value });
        }
    }
    Ok(())
}

pub fn score_scaled(
    pred_box: &BoundingBox,
    gt_box: &BoundingBox,
    sigma: &[f64; 4],
) -> Result<CornerScores> {
    check_sigma(sigma)?;
    let raw = score_unscaled(pred_box, gt_box);
    Ok(std::array::from_fn(|c| raw[c] / sigma[c]))
}

/// Scores of one record under the chosen scaling, using `record.sigma`.
pub fn record_scores(record: &DetectionRecord, scaling: Scaling) -> Result<CornerScores> {
    match scaling {
        Scaling::Unscaled => Ok(score_unscaled(&record.pred_box, &record.gt_box)),
        Scaling::Scaled => score_scaled(&record.pred_box, &record.gt_box, &record.sigma),
    }
}

/// Rank `ceil((n + 1)(1 - alpha))` of the conformal order statistic (1-based).
///
/// A relative guard of 1e-9 keeps products like `10 * 0.9` from rounding up
/// past an exact integer.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let target = (n as f64 + 1.0) * (1.0 - alpha);
    let k = (target - 1e-9 * target.max(1.0)).ceil();
    k.max(1.0) as usize
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            name: "alpha",
            value: alpha,
            range: "(0, 1)",
        })
    }
}

/// `ceil((n + 1)(1 - alpha))`-th smallest score, or `+inf` when that rank
/// exceeds `n`.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let k = conformal_rank(scores.len(), alpha);
    if k > scores.len() {
        return Ok(f64::INFINITY);
    }
    let mut sorted = scores.to_vec();
    // k-th order statistic; selection avoids a full sort.
    let (_, kth, _) = sorted.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*kth)
}

/// Per-corner box miscoverage that guarantees `1 - alpha_bbox` box coverage
/// by Boole's inequality.
pub fn bonferroni_corner_alpha(alpha_bbox: f64) -> Result<f64> {
    if alpha_bbox > 0.0 && alpha_bbox < 1.0 {
        Ok(alpha_bbox / 4.0)
    } else {
        Err(Error::OutOfRange {
            name: "alpha_bbox",
            value: alpha_bbox,
            range: "(0, 1)",
        })
    }
}

fn group_quantiles(scores: &[CornerScores], alpha: f64, min_n: usize) -> Result<GroupQuantiles> {
    let n = scores.len();
    let mut quantiles = [0.0; 4];
    let mut column = Vec::with_capacity(n);
    for (c, q) in quantiles.iter_mut().enumerate() {
        column.clear();
        column.extend(scores.iter().map(|s| s[c]));
        *q = conformal_quantile(&column, alpha)?;
    }
    Ok(GroupQuantiles {
        n,
        level: conformal_rank(n, alpha) as f64 / n as f64,
        quantiles,
        below_min: n < min_n,
    })
}

/// One quantile per corner from all calibration records regardless of class.
pub fn fit_class_agnostic(
    records: &[DetectionRecord],
    alpha_corner: f64,
    scaling: Scaling,
) -> Result<QuantileTable> {
    check_alpha(alpha_corner)?;
    if records.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let scores = records
        .iter()
        .map(|r| record_scores(r, scaling))
        .collect::<Result<Vec<_>>>()?;
    let mut groups = BTreeMap::new();
    groups.insert(Group::Agnostic, group_quantiles(&scores, alpha_corner, 0)?);
    Ok(QuantileTable {
        scope: QuantileScope::ClassAgnostic,
        alpha: alpha_corner,
        groups,
    })
}

/// Per-corner quantiles for every ground-truth class in `[0, n_classes)`.
///
/// Classes with fewer than `min_per_class` calibration records are fitted
/// anyway (possibly to `+inf`) and flagged.
pub fn fit_class_wise(
    records: &[DetectionRecord],
    n_classes: usize,
    alpha_corner: f64,
    scaling: Scaling,
    min_per_class: usize,
) -> Result<QuantileTable> {
    check_alpha(alpha_corner)?;
    if records.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let mut per_class: Vec<Vec<CornerScores>> = vec![Vec::new(); n_classes];
    for r in records {
        if r.gt_class >= n_classes {
            return Err(Error::InvalidClass {
                class: r.gt_class,
                n_classes,
            });
        }
        per_class[r.gt_class].push(record_scores(r, scaling)?);
    }
    let mut groups = BTreeMap::new();
    for (class, scores) in per_class.iter().enumerate() {
        if scores.is_empty() {
            return Err(Error::MissingClass { class });
        }
        let g = group_quantiles(scores, alpha_corner, min_per_class)?;
        if g.below_min {
            log::warn!(
                "class {class} has {} calibration records (< {min_per_class})",
                g.n
            );
        }
        groups.insert(Group::Class(class), g);
    }
    Ok(QuantileTable {
        scope: QuantileScope::ClassWise,
        alpha: alpha_corner,
        groups,
    })
}

/// Corner intervals `pred ± q * s` (`s = sigma` when scaled, 1 otherwise) and
/// the outer/inner rectangles they span.
///
/// An infinite quantile widens that corner to the image bounds along its axis,
/// extended if needed so the interval still contains the prediction.
pub fn build_conformal_box(
    pred_box: &BoundingBox,
    sigma: Option<&[f64; 4]>,
    quantiles: &[f64; 4],
    image_bounds: &BoundingBox,
) -> Result<ConformalBox> {
    if let Some(s) = sigma {
        check_sigma(s)?;
    }
    let pred = pred_box.corners();
    let mut intervals = [Interval { low: 0.0, high: 0.0 }; N_CORNERS];
    for c in 0..N_CORNERS {
        let q = quantiles[c];
        if q.is_nan() || q < 0.0 {
            return Err(Error::OutOfRange {
                name: "quantile",
                value: q,
                range: "[0, inf]",
            });
        }
        intervals[c] = if q.is_infinite() {
            let (lo, hi) = if is_x_corner(c) {
                (image_bounds.x0, image_bounds.x1)
            } else {
                (image_bounds.y0, image_bounds.y1)
            };
            Interval {
                low: lo.min(pred[c]),
                high: hi.max(pred[c]),
            }
        } else {
            let half = q * sigma.map_or(1.0, |s| s[c]);
            Interval {
                low: pred[c] - half,
                high: pred[c] + half,
            }
        };
    }
    let [ix0, iy0, ix1, iy1] = intervals;
    let outer = BoundingBox::new(
        ix0.low.min(ix1.low),
        iy0.low.min(iy1.low),
        ix0.high.max(ix1.high),
        iy0.high.max(iy1.high),
    );
    let inner = BoundingBox::new(ix0.high, iy0.high, ix1.low, iy1.low);
    Ok(ConformalBox {
        intervals,
        outer,
        inner: inner.is_ordered().then_some(inner),
    })
}
