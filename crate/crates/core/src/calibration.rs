//! Relative isotonic calibration of the per-corner sigma.
//!
//! Sigmas and absolute residuals are divided by the predicted box width (x
//! corners) or height (y corners) before fitting, so large objects do not
//! dominate the fit. The fitted map is a non-decreasing step function from
//! normalized raw sigma to normalized calibrated sigma.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{is_x_corner, DetectionRecord, N_CORNERS};

/// Box dimension (px) at or below which a record cannot be normalized.
pub const DEGENERATE_EPS: f64 = 1e-6;

/// Floor applied to calibrated sigmas to keep them strictly positive.
pub const SIGMA_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationScope {
    /// Use the detector's sigma unchanged.
    #[default]
    Raw,
    /// One relative isotonic map shared by all classes.
    GlobalRelative,
    /// One relative isotonic map per (predicted class, corner).
    PerCoordinatePerClassRelative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MapKey {
    Global,
    Corner { corner: usize },
    ClassCorner { class: usize, corner: usize },
}

/// Non-decreasing step function. `evaluate(x)` returns the value at the
/// greatest breakpoint `<= x`, the first value below the first breakpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMap {
    pub key: MapKey,
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
}

impl CalibrationMap {
    pub fn evaluate(&self, x: f64) -> f64 {
        let idx = self.breakpoints.partition_point(|&b| b <= x);
        self.values[idx.saturating_sub(1)]
    }

    fn with_key(mut self, key: MapKey) -> Self {
        self.key = key;
        self
    }
}

/// Weighted least-squares non-decreasing fit of `y` on `x` (pool adjacent
/// violators). Points with equal `x` share one fitted value.
///
/// Breakpoints are the smallest `x` of each pooled block; consecutive block
/// values are strictly increasing.
pub fn pava_fit(points: &[(f64, f64, f64)]) -> Result<CalibrationMap> {
    if points.is_empty() {
        return Err(Error::EmptyFit);
    }
    for &(x, y, w) in points {
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::InvalidFitInput(format!("non-finite point ({x}, {y})")));
        }
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::InvalidFitInput(format!("weight {w} is not > 0")));
        }
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].0.total_cmp(&points[b].0));

    // (start x, sum w*y, sum w)
    let mut blocks: Vec<(f64, f64, f64)> = Vec::with_capacity(points.len());
    let mut last_x = f64::NAN;
    for i in order {
        let (x, y, w) = points[i];
        if x == last_x {
            let top = blocks.last_mut().expect("tie follows a block");
            top.1 += w * y;
            top.2 += w;
        } else {
            blocks.push((x, w * y, w));
            last_x = x;
        }
        while blocks.len() >= 2 {
            let (_, cy, cw) = blocks[blocks.len() - 1];
            let (_, py, pw) = blocks[blocks.len() - 2];
            if py / pw < cy / cw {
                break;
            }
            blocks.pop();
            let prev = blocks.last_mut().expect("len >= 1");
            prev.1 += cy;
            prev.2 += cw;
        }
    }
    Ok(CalibrationMap {
        key: MapKey::Global,
        breakpoints: blocks.iter().map(|b| b.0).collect(),
        values: blocks.iter().map(|b| b.1 / b.2).collect(),
    })
}

fn corner_extent(record: &DetectionRecord, corner: usize) -> Result<f64> {
    let (dimension, value) = if is_x_corner(corner) {
        ("width", record.pred_box.width())
    } else {
        ("height", record.pred_box.height())
    };
    if value > DEGENERATE_EPS {
        Ok(value)
    } else {
        Err(Error::DegenerateBox { dimension, value })
    }
}

/// `sigma[corner]` divided by the predicted box width (x) or height (y).
pub fn normalize_sigma(record: &DetectionRecord, corner: usize) -> Result<f64> {
    Ok(record.sigma[corner] / corner_extent(record, corner)?)
}

/// Isotonic regression target: the absolute residual normalized like the
/// sigma, times `sqrt(pi / 2)` so that its mean equals the standard deviation
/// of a zero-mean Gaussian error.
pub fn normalized_residual_target(record: &DetectionRecord, corner: usize) -> Result<f64> {
    let p = record.pred_box.corners()[corner];
    let g = record.gt_box.corners()[corner];
    Ok((p - g).abs() / corner_extent(record, corner)? * FRAC_PI_2.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibratorOptions {
    /// Global scope: pool all four corners into one map (`true`) or fit one
    /// map per corner (`false`).
    pub pool_corners: bool,
}

impl Default for CalibratorOptions {
    fn default() -> Self {
        Self { pool_corners: true }
    }
}

/// Fitted sigma calibration. `Raw` scope holds no maps and is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibrator {
    pub scope: CalibrationScope,
    pub options: CalibratorOptions,
    pub maps: Vec<CalibrationMap>,
    /// Used for (class, corner) cells that had too few fit points.
    pub fallback: Option<CalibrationMap>,
}

impl Calibrator {
    pub fn identity() -> Self {
        Self {
            scope: CalibrationScope::Raw,
            options: CalibratorOptions::default(),
            maps: Vec::new(),
            fallback: None,
        }
    }

    pub fn map(&self, key: MapKey) -> Option<&CalibrationMap> {
        self.maps.iter().find(|m| m.key == key)
    }

    fn map_for(&self, class: usize, corner: usize) -> Option<&CalibrationMap> {
        let key = match self.scope {
            CalibrationScope::Raw => return None,
            CalibrationScope::GlobalRelative if self.options.pool_corners => MapKey::Global,
            CalibrationScope::GlobalRelative => MapKey::Corner { corner },
            CalibrationScope::PerCoordinatePerClassRelative => MapKey::ClassCorner { class, corner },
        };
        self.map(key).or(self.fallback.as_ref())
    }
}

/// Minimum fit points for a per-(class, corner) map.
const MIN_CELL_POINTS: usize = 2;

// (class, corner, normalized sigma, target)
type FitPoint = (usize, usize, f64, f64);

fn fit_points(records: &[DetectionRecord]) -> (Vec<FitPoint>, usize) {
    let mut points = Vec::with_capacity(records.len() * N_CORNERS);
    let mut skipped = 0;
    for r in records {
        let class = r.predicted_class();
        let row: Result<Vec<_>> = (0..N_CORNERS)
            .map(|c| Ok((class, c, normalize_sigma(r, c)?, normalized_residual_target(r, c)?)))
            .collect();
        match row {
            Ok(row) => points.extend(row),
            Err(_) => skipped += 1,
        }
    }
    (points, skipped)
}

fn fit_subset<'a, I>(pts: I) -> Result<CalibrationMap>
where
    I: Iterator<Item = &'a FitPoint>,
{
    let xyw: Vec<_> = pts.map(|&(_, _, x, y)| (x, y, 1.0)).collect();
    pava_fit(&xyw)
}

/// Fits the calibration maps for `scope` on `records`.
pub fn fit_calibrator(
    records: &[DetectionRecord],
    scope: CalibrationScope,
    options: CalibratorOptions,
) -> Result<Calibrator> {
    if scope == CalibrationScope::Raw {
        return Ok(Calibrator {
            options,
            ..Calibrator::identity()
        });
    }
    let (points, skipped) = fit_points(records);
    if skipped > 0 {
        log::info!("excluded {skipped} records with degenerate predicted boxes from sigma calibration");
    }
    if points.is_empty() {
        return Err(Error::EmptyFit);
    }
    let global = fit_subset(points.iter())?;
    let mut maps = Vec::new();
    let mut fallback = None;
    match scope {
        CalibrationScope::Raw => unreachable!(),
        CalibrationScope::GlobalRelative if options.pool_corners => maps.push(global),
        CalibrationScope::GlobalRelative => {
            for corner in 0..N_CORNERS {
                let m = fit_subset(points.iter().filter(|p| p.1 == corner))?;
                maps.push(m.with_key(MapKey::Corner { corner }));
            }
        }
        CalibrationScope::PerCoordinatePerClassRelative => {
            let mut cells: BTreeMap<(usize, usize), Vec<FitPoint>> = BTreeMap::new();
            for p in &points {
                cells.entry((p.0, p.1)).or_default().push(*p);
            }
            for ((class, corner), pts) in &cells {
                if pts.len() < MIN_CELL_POINTS {
                    log::info!("class {class} corner {corner}: {} fit points, using global map", pts.len());
                    continue;
                }
                let m = fit_subset(pts.iter())?;
                maps.push(m.with_key(MapKey::ClassCorner {
                    class: *class,
                    corner: *corner,
                }));
            }
            fallback = Some(global);
        }
    }
    Ok(Calibrator {
        scope,
        options,
        maps,
        fallback,
    })
}

/// Calibrated per-corner sigma for one record (normalize, map, denormalize).
///
/// Fails with `DegenerateBox` when the predicted box cannot be normalized;
/// see [`apply_or_raw`] for the fallback used by the experiment pipeline.
pub fn apply_calibrated_sigma(calibrator: &Calibrator, record: &DetectionRecord) -> Result<[f64; 4]> {
    if calibrator.scope == CalibrationScope::Raw {
        return Ok(record.sigma);
    }
    let class = record.predicted_class();
    let mut out = [0.0; 4];
    for (c, slot) in out.iter_mut().enumerate() {
        let extent = corner_extent(record, c)?;
        let raw = record.sigma[c] / extent;
        let mapped = calibrator.map_for(class, c).map_or(raw, |m| m.evaluate(raw));
        *slot = (mapped * extent).max(SIGMA_FLOOR);
    }
    Ok(out)
}

/// Like [`apply_calibrated_sigma`] but returns the raw sigma for degenerate
/// boxes. The flag is `true` when the fallback was taken.
pub fn apply_or_raw(calibrator: &Calibrator, record: &DetectionRecord) -> ([f64; 4], bool) {
    match apply_calibrated_sigma(calibrator, record) {
        Ok(s) => (s, false),
        Err(_) => (record.sigma, true),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sse(points: &[(f64, f64, f64)], fitted: &[f64]) -> f64 {
        points.iter().zip(fitted).map(|(&(_, y, w), f)| w * (y - f).powi(2)).sum()
    }

    fn fitted_at_points(points: &[(f64, f64, f64)]) -> Vec<f64> {
        let m = pava_fit(points).unwrap();
        points.iter().map(|p| m.evaluate(p.0)).collect()
    }

    /// Exhaustive oracle: every partition of `x`-sorted, distinct-x points into
    /// consecutive blocks, each set to its weighted mean, keeping those that
    /// are non-decreasing. The isotonic optimum is always of this form.
    fn brute_force_sse(points: &[(f64, f64, f64)]) -> f64 {
        let n = points.len();
        let mut best = f64::INFINITY;
        for cuts in 0u32..(1 << (n - 1)) {
            let mut fitted = vec![0.0; n];
            let mut start = 0;
            let mut prev_mean = f64::NEG_INFINITY;
            let mut ok = true;
            for end in 1..=n {
                if end == n || cuts & (1 << (end - 1)) != 0 {
                    let (sy, sw) = points[start..end]
                        .iter()
                        .fold((0.0, 0.0), |(sy, sw), &(_, y, w)| (sy + w * y, sw + w));
                    let mean = sy / sw;
                    if mean < prev_mean - 1e-12 {
                        ok = false;
                        break;
                    }
                    fitted[start..end].fill(mean);
                    prev_mean = mean;
                    start = end;
                }
            }
            if ok {
                best = best.min(sse(points, &fitted));
            }
        }
        best
    }

    #[test]
    fn isotonic_input_is_reproduced() {
        let pts: Vec<_> = [0.1, 0.5, 0.5, 2.0, 3.0].iter().enumerate().map(|(i, &y)| (i as f64, y, 1.0)).collect();
        assert_eq!(fitted_at_points(&pts), vec![0.1, 0.5, 0.5, 2.0, 3.0]);
    }

    #[test]
    fn two_point_violation_pools() {
        let m = pava_fit(&[(1.0, 2.0, 1.0), (2.0, 1.0, 1.0)]).unwrap();
        assert_eq!(m.evaluate(1.0), 1.5);
        assert_eq!(m.evaluate(2.0), 1.5);
        assert_eq!(m.breakpoints, vec![1.0]);
    }

    #[test]
    fn three_point_example() {
        let pts = [(1.0, 1.0, 1.0), (2.0, 3.0, 1.0), (3.0, 2.0, 1.0)];
        assert_eq!(fitted_at_points(&pts), vec![1.0, 2.5, 2.5]);
    }

    #[test]
    fn unsorted_input_and_ties_in_x() {
        let pts = [(3.0, 2.0, 1.0), (1.0, 1.0, 1.0), (2.0, 3.0, 1.0), (2.0, 5.0, 3.0)];
        let m = pava_fit(&pts).unwrap();
        // x = 2 pools to (3 + 15) / 4 = 4.5, then violates with x = 3 -> (18 + 2) / 5 = 4
        assert_eq!(m.evaluate(1.0), 1.0);
        assert_eq!(m.evaluate(2.0), 4.0);
        assert_eq!(m.evaluate(3.0), 4.0);
    }

    #[test]
    fn evaluation_extends_flat() {
        let m = pava_fit(&[(1.0, 1.0, 1.0), (2.0, 3.0, 1.0)]).unwrap();
        assert_eq!(m.evaluate(-5.0), 1.0);
        assert_eq!(m.evaluate(1.5), 1.0);
        assert_eq!(m.evaluate(100.0), 3.0);
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(pava_fit(&[]), Err(Error::EmptyFit)));
        assert!(pava_fit(&[(1.0, 1.0, 0.0)]).is_err());
        assert!(pava_fit(&[(f64::NAN, 1.0, 1.0)]).is_err());
    }

    #[test]
    fn pava_matches_brute_force_with_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let n = rng.random_range(1..=7);
            let pts: Vec<_> = (0..n)
                .map(|i| (i as f64, rng.random_range(-3.0..3.0), rng.random_range(0.1..4.0)))
                .collect();
            let got = sse(&pts, &fitted_at_points(&pts));
            assert!((got - brute_force_sse(&pts)).abs() < 1e-9);
        }
    }

    fn rec(pred: [f64; 4], gt: [f64; 4], sigma: [f64; 4], probs: Vec<f64>) -> DetectionRecord {
        DetectionRecord {
            image_id: String::new(),
            pred_box: pred.into(),
            gt_box: gt.into(),
            gt_class: 0,
            class_probs: probs,
            sigma,
        }
    }

    #[test]
    fn normalize_examples() {
        let r = rec([0.0, 0.0, 100.0, 0.5], [0.0; 4], [5.0, 1.0, 1.0, 0.5], vec![1.0]);
        assert!((normalize_sigma(&r, 0).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(normalize_sigma(&r, 3).unwrap(), 1.0);
        let flat = rec([3.0, 0.0, 3.0, 10.0], [0.0; 4], [1.0; 4], vec![1.0]);
        assert!(matches!(normalize_sigma(&flat, 0), Err(Error::DegenerateBox { .. })));
        assert!(normalize_sigma(&flat, 1).is_ok());
    }

    #[test]
    fn raw_scope_is_identity() {
        let r = rec([0.0, 0.0, 10.0, 10.0], [1.0; 4], [0.3, 0.4, 0.5, 0.6], vec![1.0]);
        let cal = fit_calibrator(std::slice::from_ref(&r), CalibrationScope::Raw, CalibratorOptions::default()).unwrap();
        assert!(cal.maps.is_empty());
        assert_eq!(apply_calibrated_sigma(&cal, &r).unwrap(), r.sigma);
    }

    #[test]
    fn doubling_map_applies_through_normalization() {
        let map = CalibrationMap {
            key: MapKey::Global,
            breakpoints: vec![0.0, 0.05, 0.1],
            values: vec![0.0, 0.1, 0.2],
        };
        let cal = Calibrator {
            scope: CalibrationScope::GlobalRelative,
            options: CalibratorOptions::default(),
            maps: vec![map],
            fallback: None,
        };
        let r = rec([0.0, 0.0, 100.0, 50.0], [0.0; 4], [5.0, 2.5, 5.0, 2.5], vec![1.0]);
        let s = apply_calibrated_sigma(&cal, &r).unwrap();
        // 0.05 maps to 0.1 on both axes, then scales back by width or height
        for (v, want) in s.iter().zip([10.0, 5.0, 10.0, 5.0]) {
            assert!((v - want).abs() < 1e-12, "{v} vs {want}");
        }
        // below the first breakpoint -> first value, floored
        let tiny = rec([0.0, 0.0, 100.0, 50.0], [0.0; 4], [1e-3; 4], vec![1.0]);
        let s = apply_calibrated_sigma(&cal, &tiny).unwrap();
        assert!(s.iter().all(|&v| v >= SIGMA_FLOOR));
        let flat = rec([3.0, 0.0, 3.0, 10.0], [0.0; 4], [1.0; 4], vec![1.0]);
        assert!(apply_calibrated_sigma(&cal, &flat).is_err());
        assert_eq!(apply_or_raw(&cal, &flat), ([1.0; 4], true));
    }

    fn synthetic(n: usize, classes: usize, factor: f64, seed: u64) -> Vec<DetectionRecord> {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = Normal::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|i| {
                let w = rng.random_range(50.0..300.0);
                let h = rng.random_range(50.0..300.0);
                let gt = [100.0, 100.0, 100.0 + w, 100.0 + h];
                let norm_sigma: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.01..0.1));
                let sigma: [f64; 4] = std::array::from_fn(|c| norm_sigma[c] * if c % 2 == 0 { w } else { h });
                let pred: [f64; 4] = std::array::from_fn(|c| gt[c] + factor * sigma[c] * std.sample(&mut rng));
                let mut probs = vec![0.0; classes];
                probs[i % classes] = 1.0;
                rec(pred, gt, sigma, probs)
            })
            .collect()
    }

    #[test]
    fn recovers_known_doubling() {
        let records = synthetic(20_000, 1, 2.0, 11);
        let cal = fit_calibrator(&records, CalibrationScope::GlobalRelative, CalibratorOptions::default()).unwrap();
        let m = cal.map(MapKey::Global).unwrap();
        // interior of the support, away from the boundary bias of isotonic fits
        let mut worst: f64 = 0.0;
        for i in 0..=50 {
            let x = 0.02 + 0.07 * i as f64 / 50.0;
            worst = worst.max((m.evaluate(x) - 2.0 * x).abs());
        }
        assert!(worst < 0.05, "max deviation {worst}");
    }

    #[test]
    fn single_class_per_class_equals_per_corner_global() {
        let records = synthetic(500, 1, 1.5, 3);
        let opts = CalibratorOptions { pool_corners: false };
        let g = fit_calibrator(&records, CalibrationScope::GlobalRelative, opts).unwrap();
        let p = fit_calibrator(&records, CalibrationScope::PerCoordinatePerClassRelative, opts).unwrap();
        for corner in 0..N_CORNERS {
            let a = g.map(MapKey::Corner { corner }).unwrap();
            let b = p.map(MapKey::ClassCorner { class: 0, corner }).unwrap();
            assert_eq!(a.breakpoints, b.breakpoints);
            assert_eq!(a.values, b.values);
        }
    }

    #[test]
    fn sparse_class_cells_fall_back_to_global() {
        let mut records = synthetic(200, 2, 1.0, 5);
        records.retain(|r| r.class_probs[1] == 0.0);
        let mut lone = records[0].clone();
        lone.class_probs = vec![0.0, 1.0];
        records.push(lone.clone());
        let cal = fit_calibrator(&records, CalibrationScope::PerCoordinatePerClassRelative, CalibratorOptions::default()).unwrap();
        assert!(cal.map(MapKey::ClassCorner { class: 1, corner: 0 }).is_none());
        let fb = cal.fallback.as_ref().unwrap();
        let s = apply_calibrated_sigma(&cal, &lone).unwrap();
        let expect = fb.evaluate(normalize_sigma(&lone, 0).unwrap()) * lone.pred_box.width();
        assert!((s[0] - expect.max(SIGMA_FLOOR)).abs() < 1e-12);
        let json = serde_json::to_string(&cal).unwrap();
        let back: Calibrator = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cal);
    }

    #[test]
    fn calibrated_sigma_is_positive_even_for_zero_residuals() {
        let r = rec([0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 10.0], [1.0; 4], vec![1.0]);
        let cal = fit_calibrator(&[r.clone(), r.clone()], CalibrationScope::GlobalRelative, CalibratorOptions::default()).unwrap();
        assert!(apply_calibrated_sigma(&cal, &r).unwrap().iter().all(|&s| s >= SIGMA_FLOOR));
    }

    proptest! {
        #[test]
        fn pava_output_is_monotone_and_idempotent(
            pts in prop::collection::vec((0.0f64..10.0, -5.0f64..5.0, 0.1f64..3.0), 1..60),
        ) {
            let m = pava_fit(&pts).unwrap();
            prop_assert!(m.breakpoints.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(m.values.windows(2).all(|w| w[0] <= w[1]));
            let refit: Vec<_> = pts.iter().map(|&(x, _, w)| (x, m.evaluate(x), w)).collect();
            let m2 = pava_fit(&refit).unwrap();
            for &(x, _, _) in &pts {
                prop_assert!((m.evaluate(x) - m2.evaluate(x)).abs() < 1e-12);
            }
        }
    }
}
