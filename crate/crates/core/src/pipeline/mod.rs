//! Seeded multi-split experiment harness.
//!
//! Each run draws its own calibration/evaluation split from a seed derived
//! from the master seed, optionally fits a sigma calibrator on the calibration
//! portion, computes conformal quantiles and scores the evaluation portion.
//! Runs are independent and may execute concurrently; the report lists them
//! in run order.

mod report;
mod split;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use report::{
    aggregate_rows, compare_reports, Aggregate, CoverageCheck, RunReport, RunRow, SignificanceRow, Stat,
};
pub use split::{calibration_count, derive_seed, disjoint_halves, random_split, DatasetSplit};

use crate::calibration::{apply_or_raw, fit_calibrator, CalibrationScope, CalibratorOptions};
use crate::classification::{build_prediction_set, classification_quantile, raps_score, RapsConfig};
use crate::error::{Error, Result};
use crate::metrics::{classwise_aggregate, MetricAccumulator, MetricRow};
use crate::model::{
    BoundingBox, ConformalBox, Dataset, DetectionRecord, Group, GroupQuantiles, MiscoverageConfig,
    QuantileScope, QuantileTable, N_CORNERS,
};
use crate::parallel::{try_map_indexed, Parallelism};
use crate::regression::{
    build_conformal_box, fit_class_agnostic, fit_class_wise, Scaling, DEFAULT_IMAGE_BOUNDS,
    DEFAULT_MIN_PER_CLASS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// One quantile per corner over all classes.
    #[default]
    ClassAgnostic,
    /// Per-class quantiles selected by the ground-truth class.
    ClassWise,
    /// Class prediction set, then the worst-case class quantile over the set.
    TwoStep,
    /// Worst-case class quantile over all classes.
    NaiveWorstCase,
}

impl Regime {
    pub fn needs_stratification(self) -> bool {
        self != Regime::ClassAgnostic
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub n_runs: usize,
    pub calib_fraction: f64,
    pub miscoverage: MiscoverageConfig,
    pub scaling: Scaling,
    pub calibration_scope: CalibrationScope,
    #[serde(default)]
    pub calibrator_options: CalibratorOptions,
    /// Fit the sigma calibrator on this share of the calibration split and
    /// compute quantiles on the rest. `None` reuses the whole split for both.
    #[serde(default)]
    pub calibrator_fit_fraction: Option<f64>,
    pub regime: Regime,
    pub raps: RapsConfig,
    pub master_seed: u64,
    /// Bounds used for infinite quantiles (default 0..10000 on both axes).
    #[serde(default)]
    pub image_bounds: Option<BoundingBox>,
    pub min_per_class: usize,
    pub stratified: bool,
    /// Two-step only: fit the class and box heads on disjoint halves of the
    /// calibration split instead of sharing it.
    #[serde(default)]
    pub disjoint_heads: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_runs: 100,
            calib_fraction: 0.8,
            miscoverage: MiscoverageConfig::default(),
            scaling: Scaling::Unscaled,
            calibration_scope: CalibrationScope::Raw,
            calibrator_options: CalibratorOptions::default(),
            calibrator_fit_fraction: None,
            regime: Regime::ClassAgnostic,
            raps: RapsConfig::default(),
            master_seed: 0,
            image_bounds: None,
            min_per_class: DEFAULT_MIN_PER_CLASS,
            stratified: false,
            disjoint_heads: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 {
            return Err(Error::InvalidConfig("n_runs must be >= 1".into()));
        }
        if !(self.calib_fraction > 0.0 && self.calib_fraction < 1.0) {
            return Err(Error::OutOfRange {
                name: "calib_fraction",
                value: self.calib_fraction,
                range: "(0, 1)",
            });
        }
        if let Some(f) = self.calibrator_fit_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::OutOfRange {
                    name: "calibrator_fit_fraction",
                    value: f,
                    range: "(0, 1)",
                });
            }
        }
        self.miscoverage.validate()?;
        self.raps.validate()?;
        if self.regime.needs_stratification() && !self.stratified {
            return Err(Error::InvalidConfig(format!(
                "regime {:?} requires stratified splitting",
                self.regime
            )));
        }
        if self.regime == Regime::TwoStep && self.raps.allow_empty {
            return Err(Error::EmptySetConfig);
        }
        if let Some(b) = &self.image_bounds {
            if !b.is_ordered() || !b.corners().iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidConfig("image bounds must be a finite ordered box".into()));
            }
        }
        Ok(())
    }

    pub fn bounds(&self) -> BoundingBox {
        self.image_bounds.unwrap_or(DEFAULT_IMAGE_BOUNDS)
    }

    fn uses_calibrator(&self) -> bool {
        self.scaling == Scaling::Scaled && self.calibration_scope != CalibrationScope::Raw
    }
}

/// Everything one run produced, including the boxes (for recovery curves).
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub row: RunRow,
    /// Indices into the evaluation dataset, in the order of `boxes`.
    pub evaluation: Vec<usize>,
    pub boxes: Vec<ConformalBox>,
}

fn vacuous_group() -> GroupQuantiles {
    GroupQuantiles {
        n: 0,
        level: f64::INFINITY,
        quantiles: [f64::INFINITY; N_CORNERS],
        below_min: true,
    }
}

/// Table of `+inf` quantiles used when there is nothing to calibrate on.
fn vacuous_table(scope: QuantileScope, alpha: f64, n_classes: usize) -> QuantileTable {
    let groups = match scope {
        QuantileScope::ClassAgnostic => BTreeMap::from([(Group::Agnostic, vacuous_group())]),
        QuantileScope::ClassWise => (0..n_classes).map(|k| (Group::Class(k), vacuous_group())).collect(),
    };
    QuantileTable { scope, alpha, groups }
}

/// Splits `indices` at `fraction` after shuffling, within each class when
/// `stratified`. Single-record classes go to the second part.
fn partition(
    dataset: &Dataset,
    indices: &[usize],
    fraction: f64,
    seed: u64,
    stratified: bool,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = if stratified {
        let mut g = vec![Vec::new(); dataset.n_classes()];
        for &i in indices {
            g[dataset.records()[i].gt_class].push(i);
        }
        g
    } else {
        vec![indices.to_vec()]
    };
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for mut g in groups {
        g.shuffle(&mut rng);
        let k = calibration_count(g.len(), fraction);
        first.extend_from_slice(&g[..k]);
        second.extend_from_slice(&g[k..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    (first, second)
}

struct Prepared {
    calibration: Vec<DetectionRecord>,
    evaluation: Vec<DetectionRecord>,
    eval_indices: Vec<usize>,
    flagged: Vec<usize>,
    sigma_fallbacks: usize,
}

fn prepare(cal_ds: &Dataset, eval_ds: Option<&Dataset>, config: &RunConfig, seed: u64) -> Result<Prepared> {
    let frac = config.calib_fraction;
    let split = random_split(cal_ds, frac, seed, config.stratified, config.min_per_class)?;
    let (eval_source, eval_indices) = match eval_ds {
        None => (cal_ds, split.evaluation),
        Some(e) => (e, random_split(e, frac, seed, config.stratified, 0)?.evaluation),
    };
    let mut cp_indices = split.calibration;
    let mut sigma_fallbacks = 0;
    let calibrator = if config.uses_calibrator() && !cp_indices.is_empty() {
        let fit_indices = match config.calibrator_fit_fraction {
            Some(f) => {
                let (fit, rest) = partition(cal_ds, &cp_indices, f, derive_seed(seed, 1), config.stratified);
                cp_indices = rest;
                fit
            }
            None => cp_indices.clone(),
        };
        let fit: Vec<DetectionRecord> = fit_indices.iter().map(|&i| cal_ds.records()[i].clone()).collect();
        Some(fit_calibrator(&fit, config.calibration_scope, config.calibrator_options)?)
    } else {
        None
    };
    let mut take = |ds: &Dataset, idx: &[usize]| -> Vec<DetectionRecord> {
        idx.iter()
            .map(|&i| {
                let mut r = ds.records()[i].clone();
                if let Some(cal) = &calibrator {
                    let (s, fell_back) = apply_or_raw(cal, &r);
                    sigma_fallbacks += usize::from(fell_back);
                    r.sigma = s;
                }
                r
            })
            .collect()
    };
    let calibration = take(cal_ds, &cp_indices);
    let evaluation = take(eval_source, &eval_indices);
    if sigma_fallbacks > 0 {
        log::info!("{sigma_fallbacks} records kept raw sigma (degenerate predicted box)");
    }
    Ok(Prepared {
        calibration,
        evaluation,
        eval_indices,
        flagged: split.flagged,
        sigma_fallbacks,
    })
}

fn class_quantiles(records: &[DetectionRecord], n_classes: usize, config: &RunConfig) -> Result<QuantileTable> {
    let alpha = config.miscoverage.alpha_corner;
    if records.is_empty() {
        return Ok(vacuous_table(QuantileScope::ClassWise, alpha, n_classes));
    }
    fit_class_wise(records, n_classes, alpha, config.scaling, config.min_per_class)
}

/// One run of `config.regime` with split seed `seed`.
pub fn execute_run(
    cal_ds: &Dataset,
    eval_ds: Option<&Dataset>,
    config: &RunConfig,
    run: usize,
) -> Result<RunOutcome> {
    let seed = derive_seed(config.master_seed, run as u64);
    let p = prepare(cal_ds, eval_ds, config, seed)?;
    let k = cal_ds.n_classes();
    let alpha = config.miscoverage.alpha_corner;
    let bounds = config.bounds();
    let sigma = |r: &DetectionRecord| match config.scaling {
        Scaling::Scaled => Some(r.sigma),
        Scaling::Unscaled => None,
    };
    let mut boxes = Vec::with_capacity(p.evaluation.len());
    let mut qhat_class = None;

    let (table, metrics) = if config.regime == Regime::ClassAgnostic {
        let table = if p.calibration.is_empty() {
            vacuous_table(QuantileScope::ClassAgnostic, alpha, k)
        } else {
            fit_class_agnostic(&p.calibration, alpha, config.scaling)?
        };
        let q = *table.get(Group::Agnostic).expect("agnostic group");
        let mut acc = MetricAccumulator::default();
        for r in &p.evaluation {
            let b = build_conformal_box(&r.pred_box, sigma(r).as_ref(), &q, &bounds)?;
            acc.add(&r.gt_box, &b, alpha, None);
            boxes.push(b);
        }
        (table, acc.finish())
    } else {
        let (class_head, box_head) = if config.regime == Regime::TwoStep && config.disjoint_heads {
            let idx: Vec<usize> = (0..p.calibration.len()).collect();
            let cal = Dataset::new(p.calibration.clone()).ok();
            match cal {
                Some(cal) => {
                    let (a, b) = disjoint_halves(&cal, &idx);
                    let pick = |v: &[usize]| v.iter().map(|&i| p.calibration[i].clone()).collect::<Vec<_>>();
                    (pick(&a), pick(&b))
                }
                None => (Vec::new(), Vec::new()),
            }
        } else {
            (p.calibration.clone(), p.calibration.clone())
        };
        let table = class_quantiles(&box_head, k, config)?;
        if config.regime == Regime::TwoStep {
            let scores = class_head
                .iter()
                .map(|r| raps_score(&r.class_probs, r.gt_class, &config.raps))
                .collect::<Result<Vec<_>>>()?;
            qhat_class = Some(if scores.is_empty() {
                f64::INFINITY
            } else {
                classification_quantile(&scores, config.miscoverage.alpha_class)?
            });
        }
        let all_classes = table.worst_case(0..k).expect("every class has quantiles");
        let mut per_class: BTreeMap<usize, MetricAccumulator> = BTreeMap::new();
        for r in &p.evaluation {
            let (q, set) = match config.regime {
                Regime::ClassWise => (*table.for_class(r.gt_class).expect("class quantiles"), None),
                Regime::NaiveWorstCase => (all_classes, Some((k, true))),
                Regime::TwoStep => {
                    let qhat = qhat_class.expect("two-step quantile");
                    let set = build_prediction_set(&r.class_probs, qhat, &config.raps);
                    let q = table.worst_case(set.classes.iter().copied()).unwrap_or(all_classes);
                    (q, Some((set.len(), set.contains(r.gt_class))))
                }
                Regime::ClassAgnostic => unreachable!(),
            };
            let b = build_conformal_box(&r.pred_box, sigma(r).as_ref(), &q, &bounds)?;
            per_class.entry(r.gt_class).or_default().add(&r.gt_box, &b, alpha, set);
            boxes.push(b);
        }
        let metrics = if per_class.is_empty() {
            MetricAccumulator::default().finish()
        } else {
            let counts: BTreeMap<usize, usize> = per_class.iter().map(|(c, a)| (*c, a.len())).collect();
            let rows: BTreeMap<usize, MetricRow> = per_class.iter().map(|(c, a)| (*c, a.finish())).collect();
            classwise_aggregate(&rows, &counts)?
        };
        (table, metrics)
    };

    let mut flagged = p.flagged.clone();
    flagged.extend(table.flagged_groups().into_iter().filter_map(|g| match g {
        Group::Class(c) => Some(c),
        Group::Agnostic => None,
    }));
    flagged.sort_unstable();
    flagged.dedup();

    Ok(RunOutcome {
        row: RunRow {
            run,
            seed,
            n_calibration: p.calibration.len(),
            metrics,
            quantiles: table,
            qhat_class,
            flagged_classes: flagged,
            sigma_fallbacks: p.sigma_fallbacks,
        },
        evaluation: p.eval_indices,
        boxes,
    })
}

fn check_inputs(cal_ds: &Dataset, eval_ds: Option<&Dataset>, config: &RunConfig) -> Result<()> {
    config.validate()?;
    if let Some(e) = eval_ds {
        if e.n_classes() != cal_ds.n_classes() {
            return Err(Error::InvalidConfig(format!(
                "evaluation data has {} classes, calibration data has {}",
                e.n_classes(),
                cal_ds.n_classes()
            )));
        }
    }
    Ok(())
}

/// Runs `config.n_runs` seeded splits of `config.regime`.
///
/// With `eval_ds`, calibration records come from `cal_ds` and evaluation
/// records from `eval_ds` (each split with the same per-run seed), which is
/// how a distribution-shift study is set up.
pub fn run_experiment(
    cal_ds: &Dataset,
    eval_ds: Option<&Dataset>,
    config: &RunConfig,
    parallelism: Parallelism,
) -> Result<RunReport> {
    check_inputs(cal_ds, eval_ds, config)?;
    let rows = try_map_indexed(config.n_runs, parallelism, |run| {
        execute_run(cal_ds, eval_ds, config, run).map(|o| o.row)
    })?;
    Ok(RunReport::new(config.clone(), rows))
}

fn with_regime(config: &RunConfig, regime: Regime) -> RunConfig {
    RunConfig {
        regime,
        stratified: config.stratified || regime.needs_stratification(),
        ..config.clone()
    }
}

pub fn run_class_agnostic(dataset: &Dataset, config: &RunConfig, parallelism: Parallelism) -> Result<RunReport> {
    run_experiment(dataset, None, &with_regime(config, Regime::ClassAgnostic), parallelism)
}

pub fn run_class_wise(dataset: &Dataset, config: &RunConfig, parallelism: Parallelism) -> Result<RunReport> {
    run_experiment(dataset, None, &with_regime(config, Regime::ClassWise), parallelism)
}

pub fn run_two_step(dataset: &Dataset, config: &RunConfig, parallelism: Parallelism) -> Result<RunReport> {
    run_experiment(dataset, None, &with_regime(config, Regime::TwoStep), parallelism)
}

pub fn run_naive_worst_case(dataset: &Dataset, config: &RunConfig, parallelism: Parallelism) -> Result<RunReport> {
    run_experiment(dataset, None, &with_regime(config, Regime::NaiveWorstCase), parallelism)
}

/// A point of a recovery curve, pooled over runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryPoint {
    pub method: String,
    pub alpha_corner: f64,
    pub iou_threshold: f64,
    /// Evaluation records with prediction IoU below the threshold.
    pub n_below: usize,
    pub n_recovered: usize,
    pub rate: Option<f64>,
}

/// Method label used in recovery output.
pub fn method_label(scaling: Scaling, scope: CalibrationScope) -> String {
    match (scaling, scope) {
        (Scaling::Unscaled, _) => "unscaled".into(),
        (Scaling::Scaled, CalibrationScope::Raw) => "scaled".into(),
        (Scaling::Scaled, CalibrationScope::GlobalRelative) => "scaled_rel_ir".into(),
        (Scaling::Scaled, CalibrationScope::PerCoordinatePerClassRelative) => "scaled_rel_ir_pco_pc".into(),
    }
}

/// Recovery rate against IoU threshold for each method and alpha, pooling
/// all evaluation records of all runs.
pub fn recovery_sweep(
    cal_ds: &Dataset,
    eval_ds: Option<&Dataset>,
    base: &RunConfig,
    methods: &[(Scaling, CalibrationScope)],
    alphas: &[f64],
    thresholds: &[f64],
    parallelism: Parallelism,
) -> Result<Vec<RecoveryPoint>> {
    let eval_source = eval_ds.unwrap_or(cal_ds);
    let mut out = Vec::new();
    for &(scaling, scope) in methods {
        for &alpha in alphas {
            let config = RunConfig {
                scaling,
                calibration_scope: scope,
                miscoverage: MiscoverageConfig::new(alpha, base.miscoverage.alpha_class)?,
                ..base.clone()
            };
            check_inputs(cal_ds, eval_ds, &config)?;
            let outcomes = try_map_indexed(config.n_runs, parallelism, |run| {
                execute_run(cal_ds, eval_ds, &config, run)
            })?;
            for &t in thresholds {
                let (mut below, mut recovered) = (0, 0);
                for o in &outcomes {
                    for (&i, b) in o.evaluation.iter().zip(&o.boxes) {
                        let r = &eval_source.records()[i];
                        if crate::metrics::iou(&r.pred_box, &r.gt_box) < t {
                            below += 1;
                            recovered += usize::from(b.outer.contains(&r.gt_box));
                        }
                    }
                }
                out.push(RecoveryPoint {
                    method: method_label(scaling, scope),
                    alpha_corner: alpha,
                    iou_threshold: t,
                    n_below: below,
                    n_recovered: recovered,
                    rate: (below > 0).then(|| recovered as f64 / below as f64),
                });
            }
        }
    }
    Ok(out)
}
