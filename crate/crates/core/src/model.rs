//! Domain types shared by every module.
//!
//! Corner order is fixed everywhere as `(x0, y0, x1, y1)`: box arrays, sigma
//! vectors and quantile tables all index corners the same way.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serde_util;

/// Number of box corners (coordinates) conformalized per detection.
pub const N_CORNERS: usize = 4;

pub const CORNER_NAMES: [&str; N_CORNERS] = ["x0", "y0", "x1", "y1"];

/// Tolerance on `sum(class_probs) == 1`.
pub const PROB_SUM_TOL: f64 = 1e-6;

/// Corners 0 and 2 are horizontal coordinates, 1 and 3 vertical.
#[inline]
pub fn is_x_corner(corner: usize) -> bool {
    corner.is_multiple_of(2)
}

/// Axis-aligned box stored as corner pairs. Serialized as `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub const fn from_corners(c: [f64; 4]) -> Self {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub const fn corners(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// Width for x corners, height for y corners.
    pub fn extent_for_corner(&self, corner: usize) -> f64 {
        if is_x_corner(corner) {
            self.width()
        } else {
            self.height()
        }
    }

    pub fn is_ordered(&self) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1
    }

    /// Inclusive containment of `other` in `self`.
    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }
}

impl From<[f64; 4]> for BoundingBox {
    fn from(c: [f64; 4]) -> Self {
        Self::from_corners(c)
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.corners()
    }
}

/// One matched detection: a prediction paired with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub pred_box: BoundingBox,
    pub gt_box: BoundingBox,
    pub gt_class: usize,
    pub class_probs: Vec<f64>,
    /// Per-corner aleatoric standard deviation in pixels.
    pub sigma: [f64; 4],
}

impl DetectionRecord {
    pub fn n_classes(&self) -> usize {
        self.class_probs.len()
    }

    /// Most probable class, ties broken towards the lower id.
    pub fn predicted_class(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.class_probs.iter().enumerate() {
            if p > self.class_probs[best] {
                best = k;
            }
        }
        best
    }
}

/// A broken invariant found by [`validate_record`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.field, self.rule)
    }
}

fn violation(field: impl Into<String>, rule: impl Into<String>) -> Violation {
    Violation {
        field: field.into(),
        rule: rule.into(),
    }
}

fn check_box(name: &str, b: &BoundingBox, out: &mut Vec<Violation>) {
    for (i, v) in b.corners().iter().enumerate() {
        if !v.is_finite() {
            out.push(violation(format!("{name}[{i}]"), "not finite"));
        }
    }
    if b.x0 > b.x1 {
        out.push(violation(name, format!("x0 {} > x1 {}", b.x0, b.x1)));
    }
    if b.y0 > b.y1 {
        out.push(violation(name, format!("y0 {} > y1 {}", b.y0, b.y1)));
    }
}

/// Checks every record invariant. Never fails; an empty list means valid.
pub fn validate_record(record: &DetectionRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    check_box("pred_box", &record.pred_box, &mut out);
    check_box("gt_box", &record.gt_box, &mut out);

    let k = record.class_probs.len();
    if k == 0 {
        out.push(violation("class_probs", "is empty"));
    } else {
        for (i, &p) in record.class_probs.iter().enumerate() {
            if !(p.is_finite() && p >= 0.0) {
                out.push(violation(format!("class_probs[{i}]"), format!("{p} not >= 0")));
            }
        }
        let sum: f64 = record.class_probs.iter().sum();
        if !((sum - 1.0).abs() <= PROB_SUM_TOL) {
            out.push(violation(
                "class_probs",
                format!("sum {sum} differs from 1 by more than {PROB_SUM_TOL:e}"),
            ));
        }
        if record.gt_class >= k {
            out.push(violation("gt_class", format!("{} not in [0, {k})", record.gt_class)));
        }
    }

    for (i, &s) in record.sigma.iter().enumerate() {
        if !(s.is_finite() && s > 0.0) {
            out.push(violation(format!("sigma[{i}]"), "not > 0"));
        }
    }
    out
}

/// Records sharing one class count `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<DetectionRecord>,
    n_classes: usize,
}

impl Dataset {
    /// Infers `K` from the first record. A different class-probability length
    /// or an out-of-range `gt_class` on any later record is an error.
    pub fn new(records: Vec<DetectionRecord>) -> Result<Self> {
        let first = records.first().ok_or(Error::EmptyFile)?;
        let n_classes = first.n_classes();
        if n_classes == 0 {
            return Err(Error::Validation {
                line: 1,
                rule: "class_probs is empty".into(),
            });
        }
        for (i, r) in records.iter().enumerate() {
            if r.n_classes() != n_classes {
                return Err(Error::Validation {
                    line: i + 1,
                    rule: format!(
                        "class_probs has {} entries, dataset has K = {n_classes}",
                        r.n_classes()
                    ),
                });
            }
            if r.gt_class >= n_classes {
                return Err(Error::Validation {
                    line: i + 1,
                    rule: format!("gt_class {} not in [0, {n_classes})", r.gt_class),
                });
            }
        }
        Ok(Self { records, n_classes })
    }

    pub fn records(&self) -> &[DetectionRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<DetectionRecord> {
        self.records
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of records per ground-truth class, including zero counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for r in &self.records {
            counts[r.gt_class] += 1;
        }
        counts
    }
}

/// Per-corner miscoverage `alpha_corner` and the classification level
/// `alpha_class` used by the two-step pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiscoverageConfig {
    pub alpha_corner: f64,
    pub alpha_class: f64,
}

impl MiscoverageConfig {
    pub fn new(alpha_corner: f64, alpha_class: f64) -> Result<Self> {
        let cfg = Self {
            alpha_corner,
            alpha_class,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_corner > 0.0 && self.alpha_corner < 0.25) {
            return Err(Error::OutOfRange {
                name: "alpha_corner",
                value: self.alpha_corner,
                range: "(0, 0.25)",
            });
        }
        if !(self.alpha_class > 0.0 && self.alpha_class < 1.0) {
            return Err(Error::OutOfRange {
                name: "alpha_class",
                value: self.alpha_class,
                range: "(0, 1)",
            });
        }
        Ok(())
    }

    /// Box-level miscoverage budget `4 * alpha_corner`.
    pub fn alpha_bbox(&self) -> f64 {
        4.0 * self.alpha_corner
    }

    /// Nominal Bonferroni box coverage `1 - 4 * alpha_corner`.
    pub fn nominal_box_coverage(&self) -> f64 {
        1.0 - self.alpha_bbox()
    }
}

impl Default for MiscoverageConfig {
    fn default() -> Self {
        Self {
            alpha_corner: 0.025,
            alpha_class: 0.01,
        }
    }
}

/// Calibration group of a quantile: every record, or one ground-truth class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Group {
    Agnostic,
    Class(usize),
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::Agnostic => f.write_str("agnostic"),
            Group::Class(k) => write!(f, "class:{k}"),
        }
    }
}

impl From<Group> for String {
    fn from(g: Group) -> Self {
        g.to_string()
    }
}

impl TryFrom<String> for Group {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        if s == "agnostic" {
            return Ok(Group::Agnostic);
        }
        s.strip_prefix("class:")
            .and_then(|k| k.parse().ok())
            .map(Group::Class)
            .ok_or_else(|| format!("bad group key {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantileScope {
    ClassAgnostic,
    ClassWise,
}

/// Conformal quantiles of one calibration group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupQuantiles {
    /// Calibration records in the group.
    pub n: usize,
    /// `ceil((n + 1)(1 - alpha)) / n`; above 1 when the quantile is infinite.
    #[serde(with = "serde_util::inf_f64")]
    pub level: f64,
    #[serde(with = "serde_util::inf_array4")]
    pub quantiles: [f64; 4],
    /// Group has fewer than `min_per_class` calibration records.
    pub below_min: bool,
}

/// Per-corner conformal quantiles, keyed by calibration group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileTable {
    pub scope: QuantileScope,
    pub alpha: f64,
    pub groups: BTreeMap<Group, GroupQuantiles>,
}

impl QuantileTable {
    pub fn get(&self, group: Group) -> Option<&[f64; 4]> {
        self.groups.get(&group).map(|g| &g.quantiles)
    }

    /// Quantiles of a ground-truth class (class-wise) or the single agnostic group.
    pub fn for_class(&self, class: usize) -> Option<&[f64; 4]> {
        match self.scope {
            QuantileScope::ClassAgnostic => self.get(Group::Agnostic),
            QuantileScope::ClassWise => self.get(Group::Class(class)),
        }
    }

    /// Corner-wise maximum over the listed classes.
    pub fn worst_case<I: IntoIterator<Item = usize>>(&self, classes: I) -> Option<[f64; 4]> {
        let mut out: Option<[f64; 4]> = None;
        for k in classes {
            let q = self.for_class(k)?;
            let acc = out.get_or_insert([0.0; 4]);
            for c in 0..N_CORNERS {
                acc[c] = acc[c].max(q[c]);
            }
        }
        out
    }

    /// Groups flagged as below the minimum calibration size.
    pub fn flagged_groups(&self) -> Vec<Group> {
        self.groups
            .iter()
            .filter(|(_, g)| g.below_min)
            .map(|(k, _)| *k)
            .collect()
    }
}

/// Closed interval `[low, high]` for one corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.low <= v && v <= self.high
    }

    pub fn width(&self) -> f64 {
        self.high - self.low
    }
}

/// Conformal region `outer \ inner` together with its four corner intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConformalBox {
    pub intervals: [Interval; 4],
    pub outer: BoundingBox,
    /// `None` when the corner intervals overlap and no inner rectangle exists.
    pub inner: Option<BoundingBox>,
}
