use serde::{Deserialize, Serialize};

use super::{Regime, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{paired_t_test, MetricRow};
use crate::model::{QuantileTable, CORNER_NAMES};
use crate::regression::Scaling;
use crate::serde_util;

/// Result of one seeded run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run: usize,
    pub seed: u64,
    /// Records used to compute the quantiles.
    pub n_calibration: usize,
    pub metrics: MetricRow,
    pub quantiles: QuantileTable,
    /// Classification quantile (two-step only).
    #[serde(with = "serde_util::inf_opt_f64", default)]
    pub qhat_class: Option<f64>,
    /// Classes below the minimum calibration size or missing from evaluation.
    pub flagged_classes: Vec<usize>,
    /// Records whose sigma could not be calibrated and stayed raw.
    pub sigma_fallbacks: usize,
}

/// Mean and sample standard deviation over runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Stat { mean: 0.0, std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

/// Observed coverage against its nominal level.
///
/// `standard_error` is the Monte-Carlo standard error of the mean over runs
/// (binomial with the nominal level for a single run). The check is flagged
/// when the observed mean is more than three standard errors below nominal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCheck {
    pub metric: String,
    pub nominal: f64,
    pub observed: f64,
    pub standard_error: f64,
    pub below_nominal: bool,
}

impl CoverageCheck {
    fn new(metric: &str, nominal: f64, values: &[f64], n_eval: usize) -> Self {
        let s = Stat::of(values);
        let se = if values.len() > 1 {
            s.std / (values.len() as f64).sqrt()
        } else {
            (nominal * (1.0 - nominal) / n_eval.max(1) as f64).sqrt()
        };
        CoverageCheck {
            metric: metric.to_string(),
            nominal,
            observed: s.mean,
            standard_error: se,
            below_nominal: s.mean + 3.0 * se < nominal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_runs: usize,
    pub coverage: Stat,
    pub corner_coverage: [Stat; 4],
    pub mean_iou: Stat,
    pub interval_score: Stat,
    pub mean_set_size: Option<Stat>,
    pub class_coverage: Option<Stat>,
    pub joint_coverage: Option<Stat>,
    pub checks: Vec<CoverageCheck>,
}

fn column(rows: &[RunRow], pick: impl Fn(&MetricRow) -> f64) -> Vec<f64> {
    rows.iter().map(|r| pick(&r.metrics)).collect()
}

fn opt_column(rows: &[RunRow], pick: impl Fn(&MetricRow) -> Option<f64>) -> Option<Vec<f64>> {
    rows.iter().map(|r| pick(&r.metrics)).collect()
}

/// Mean/std per metric and the coverage checks of `rows` under `config`.
pub fn aggregate_rows(config: &RunConfig, rows: &[RunRow]) -> Aggregate {
    let m = &config.miscoverage;
    let n_eval = rows.first().map_or(0, |r| r.metrics.n_eval);
    let coverage = column(rows, |r| r.coverage);
    let mut checks = vec![CoverageCheck::new("box", m.nominal_box_coverage(), &coverage, n_eval)];
    for (c, name) in CORNER_NAMES.iter().enumerate() {
        let v = column(rows, |r| r.corner_coverage[c]);
        checks.push(CoverageCheck::new(&format!("corner_{name}"), 1.0 - m.alpha_corner, &v, n_eval));
    }
    let class_coverage = opt_column(rows, |r| r.class_coverage);
    let joint_coverage = opt_column(rows, |r| r.joint_coverage);
    if config.regime == Regime::TwoStep {
        if let Some(v) = &class_coverage {
            checks.push(CoverageCheck::new("class", 1.0 - m.alpha_class, v, n_eval));
        }
        if let Some(v) = &joint_coverage {
            let nominal = (1.0 - m.alpha_class) * m.nominal_box_coverage();
            checks.push(CoverageCheck::new("joint", nominal, v, n_eval));
        }
    }
    Aggregate {
        n_runs: rows.len(),
        coverage: Stat::of(&coverage),
        corner_coverage: std::array::from_fn(|c| Stat::of(&column(rows, |r| r.corner_coverage[c]))),
        mean_iou: Stat::of(&column(rows, |r| r.mean_iou)),
        interval_score: Stat::of(&column(rows, |r| r.interval_score)),
        mean_set_size: opt_column(rows, |r| r.mean_set_size).map(|v| Stat::of(&v)),
        class_coverage: class_coverage.map(|v| Stat::of(&v)),
        joint_coverage: joint_coverage.map(|v| Stat::of(&v)),
        checks,
    }
}

fn assumptions(config: &RunConfig) -> Vec<String> {
    let mut out = vec!["calibration and evaluation records are exchangeable".to_string()];
    if config.scaling == Scaling::Scaled && config.calibrator_fit_fraction.is_none() && config.uses_calibrator() {
        out.push("sigma calibrator is fitted on the same records as the conformal quantiles".into());
    }
    if config.regime == Regime::TwoStep {
        if config.disjoint_heads {
            out.push("class and box heads are calibrated on disjoint halves of the calibration split".into());
        } else {
            out.push(
                "class and box heads share one calibration split; their errors are assumed independent".into(),
            );
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub assumptions: Vec<String>,
    pub per_run: Vec<RunRow>,
    pub aggregate: Aggregate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub significance: Option<Vec<SignificanceRow>>,
}

impl RunReport {
    pub fn new(config: RunConfig, per_run: Vec<RunRow>) -> Self {
        let aggregate = aggregate_rows(&config, &per_run);
        RunReport {
            assumptions: assumptions(&config),
            config,
            per_run,
            aggregate,
            significance: None,
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.per_run.iter().map(|r| r.seed).collect()
    }

    /// Per-run values of a named metric (`coverage`, `mean_iou`,
    /// `interval_score`, `mean_set_size`, `class_coverage`, `joint_coverage`).
    pub fn metric_values(&self, metric: &str) -> Option<Vec<f64>> {
        let rows = &self.per_run;
        match metric {
            "coverage" => Some(column(rows, |r| r.coverage)),
            "mean_iou" => Some(column(rows, |r| r.mean_iou)),
            "interval_score" => Some(column(rows, |r| r.interval_score)),
            "mean_set_size" => opt_column(rows, |r| r.mean_set_size),
            "class_coverage" => opt_column(rows, |r| r.class_coverage),
            "joint_coverage" => opt_column(rows, |r| r.joint_coverage),
            _ => None,
        }
    }
}

/// Paired comparison of one metric between two reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub metric: String,
    pub mean_a: f64,
    pub mean_b: f64,
    /// Mean of `a - b`.
    pub mean_diff: f64,
    #[serde(with = "serde_util::inf_f64")]
    pub t: f64,
    pub p: f64,
    pub significant_1pct: bool,
    pub significant_5pct: bool,
}

pub const COMPARED_METRICS: [&str; 6] = [
    "coverage",
    "mean_iou",
    "interval_score",
    "mean_set_size",
    "class_coverage",
    "joint_coverage",
];

/// Paired t-tests of `a` against `b` for every metric both reports carry.
/// The reports must come from the same split sequence.
pub fn compare_reports(a: &RunReport, b: &RunReport) -> Result<Vec<SignificanceRow>> {
    if a.per_run.len() != b.per_run.len() || a.seeds() != b.seeds() {
        return Err(Error::SeedMismatch);
    }
    let mut out = Vec::new();
    for metric in COMPARED_METRICS {
        let (Some(va), Some(vb)) = (a.metric_values(metric), b.metric_values(metric)) else {
            continue;
        };
        let t = paired_t_test(&va, &vb)?;
        out.push(SignificanceRow {
            metric: metric.to_string(),
            mean_a: Stat::of(&va).mean,
            mean_b: Stat::of(&vb).mean,
            mean_diff: t.mean_diff,
            t: t.t,
            p: t.p,
            significant_1pct: t.p < 0.01,
            significant_5pct: t.p < 0.05,
        });
    }
    Ok(out)
}
