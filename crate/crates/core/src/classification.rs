//! Adaptive (APS) and regularized adaptive (RAPS) prediction sets for the
//! classification head.
//!
//! Both scores are deterministic: no randomized tie-breaking term. APS is RAPS
//! with `penalty_a = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regression::conformal_quantile;
use crate::serde_util;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RapsConfig {
    /// Penalty added per rank beyond `threshold_b`.
    pub penalty_a: f64,
    pub threshold_b: usize,
    pub allow_empty: bool,
    /// Include the rank penalty in the running total when building sets.
    #[serde(default = "default_true")]
    pub penalize_at_inference: bool,
}

fn default_true() -> bool {
    true
}

impl Default for RapsConfig {
    fn default() -> Self {
        Self {
            penalty_a: 0.01,
            threshold_b: 5,
            allow_empty: false,
            penalize_at_inference: true,
        }
    }
}

impl RapsConfig {
    /// Plain APS (no rank penalty), non-empty sets.
    pub fn aps() -> Self {
        Self {
            penalty_a: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.penalty_a >= 0.0 && self.penalty_a.is_finite()) {
            return Err(Error::OutOfRange {
                name: "penalty_a",
                value: self.penalty_a,
                range: "[0, inf)",
            });
        }
        Ok(())
    }

    fn penalty(&self, rank: usize) -> f64 {
        self.penalty_a * rank.saturating_sub(self.threshold_b) as f64
    }
}

/// Classes of a prediction set in descending probability order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub classes: Vec<usize>,
    #[serde(with = "serde_util::inf_f64")]
    pub qhat_class: f64,
}

impl PredictionSet {
    pub fn contains(&self, class: usize) -> bool {
        self.classes.contains(&class)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Class ids sorted by descending probability, ties by ascending id.
pub fn descending_order(class_probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..class_probs.len()).collect();
    order.sort_by(|&a, &b| class_probs[b].total_cmp(&class_probs[a]).then(a.cmp(&b)));
    order
}

/// Running totals `T(k) = sum_{j<=k} p_(j) + a * max(0, k - b)` for
/// `k = 1..=K`, paired with the class at rank `k`.
fn running_totals(class_probs: &[f64], config: &RapsConfig, penalize: bool) -> Vec<(usize, f64)> {
    let mut cum = 0.0;
    descending_order(class_probs)
        .into_iter()
        .enumerate()
        .map(|(i, class)| {
            cum += class_probs[class];
            let pen = if penalize { config.penalty(i + 1) } else { 0.0 };
            (class, cum + pen)
        })
        .collect()
}

fn check_class(class_probs: &[f64], true_class: usize) -> Result<()> {
    if true_class < class_probs.len() {
        Ok(())
    } else {
        Err(Error::InvalidClass {
            class: true_class,
            n_classes: class_probs.len(),
        })
    }
}

/// Cumulative sorted probability from rank 1 through the true class's rank.
pub fn aps_score(class_probs: &[f64], true_class: usize) -> Result<f64> {
    raps_score(class_probs, true_class, &RapsConfig::aps())
}

/// APS score plus `a * max(0, rank(true_class) - b)`.
pub fn raps_score(class_probs: &[f64], true_class: usize, config: &RapsConfig) -> Result<f64> {
    check_class(class_probs, true_class)?;
    let totals = running_totals(class_probs, config, true);
    let (_, score) = totals
        .into_iter()
        .find(|&(c, _)| c == true_class)
        .expect("true class is in range");
    Ok(score)
}

/// Same order-statistic rule as the regression quantile.
pub fn classification_quantile(scores: &[f64], alpha_class: f64) -> Result<f64> {
    conformal_quantile(scores, alpha_class)
}

/// Builds the conformal prediction set for one detection.
///
/// With `allow_empty = false` the set size is `sup{k : T(k) < qhat} + 1`
/// (with `T(0) = 0`), capped at `K`; an empty result gets the top class. With
/// `allow_empty = true` the set keeps exactly the ranks whose running total is
/// `<= qhat`, the boundary that matches the calibration score, so it can be
/// empty. An infinite `qhat` returns every class.
pub fn build_prediction_set(class_probs: &[f64], qhat: f64, config: &RapsConfig) -> PredictionSet {
    let order = descending_order(class_probs);
    if qhat == f64::INFINITY {
        return PredictionSet {
            classes: order,
            qhat_class: qhat,
        };
    }
    let totals = running_totals(class_probs, config, config.penalize_at_inference);
    let size = if config.allow_empty {
        totals.iter().take_while(|&&(_, t)| t <= qhat).count()
    } else if qhat > 0.0 {
        let below = totals.iter().take_while(|&&(_, t)| t < qhat).count();
        (below + 1).min(totals.len())
    } else {
        0
    };
    let mut classes: Vec<usize> = order.into_iter().take(size).collect();
    if classes.is_empty() && !config.allow_empty && !class_probs.is_empty() {
        classes.push(totals[0].0);
    }
    PredictionSet {
        classes,
        qhat_class: qhat,
    }
}
