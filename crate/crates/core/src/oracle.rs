//! Synthetic detection datasets with a known noise model.
//!
//! Predicted corners are ground-truth corners plus Gaussian noise whose scale
//! is known per record, so coverage guarantees can be checked against ground
//! truth. Classification probabilities come from a controllable noisy
//! classifier that is independent of the box noise.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundingBox, Dataset, DetectionRecord, N_CORNERS};

/// Maps the true noise scale to the sigma the simulated detector reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SigmaBias {
    Identity,
    /// `sigma = factor * scale`
    Scale { factor: f64 },
    /// `sigma = factor * scale^exponent`
    Power { factor: f64, exponent: f64 },
}

impl SigmaBias {
    pub fn apply(&self, scale: f64) -> f64 {
        match *self {
            SigmaBias::Identity => scale,
            SigmaBias::Scale { factor } => factor * scale,
            SigmaBias::Power { factor, exponent } => factor * scale.powf(exponent),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub n_records: usize,
    pub n_classes: usize,
    /// Base corner-noise standard deviation (px) per class; one entry applies
    /// to every class.
    pub class_noise_scales: Vec<f64>,
    /// Per-record multiplier on the class scale, log-uniform over
    /// `[1, 10^hetero_decades]`. Zero gives homoscedastic classes.
    pub hetero_decades: f64,
    pub sigma_bias: SigmaBias,
    /// Extra per-class multiplier on the reported sigma (empty = all 1).
    #[serde(default)]
    pub class_sigma_factors: Vec<f64>,
    /// Relative class frequencies (empty = uniform).
    #[serde(default)]
    pub class_weights: Vec<f64>,
    pub classifier_accuracy: f64,
    pub prob_temperature: f64,
    /// Misclassified records rank the true class second instead of at a
    /// uniformly random non-top rank.
    #[serde(default)]
    pub near_miss_confusion: bool,
    /// Share of a common factor in the four corner errors, in `[0, 1)`.
    #[serde(default)]
    pub corner_correlation: f64,
    /// Multiplier on the realized noise only; reported sigma is unchanged.
    #[serde(default)]
    pub shift: Option<f64>,
    pub image_width: f64,
    pub image_height: f64,
    pub min_box_size: f64,
    pub max_box_size: f64,
    pub seed: u64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            n_records: 1000,
            n_classes: 3,
            class_noise_scales: vec![4.0],
            hetero_decades: 0.0,
            sigma_bias: SigmaBias::Identity,
            class_sigma_factors: Vec::new(),
            class_weights: Vec::new(),
            classifier_accuracy: 0.9,
            prob_temperature: 1.0,
            near_miss_confusion: false,
            corner_correlation: 0.0,
            shift: None,
            image_width: 1242.0,
            image_height: 375.0,
            min_box_size: 30.0,
            max_box_size: 200.0,
            seed: 0,
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidSpec(msg.into())
}

impl OracleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_records == 0 {
            return Err(invalid("n_records must be >= 1"));
        }
        if self.n_classes == 0 {
            return Err(invalid("n_classes must be >= 1"));
        }
        let per_class = |v: &[f64], name: &str| -> Result<()> {
            if !(v.is_empty() || v.len() == 1 || v.len() == self.n_classes) {
                return Err(invalid(format!("{name} needs 1 or {} entries", self.n_classes)));
            }
            if v.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(invalid(format!("{name} entries must be > 0")));
            }
            Ok(())
        };
        if self.class_noise_scales.is_empty() {
            return Err(invalid("class_noise_scales is empty"));
        }
        per_class(&self.class_noise_scales, "class_noise_scales")?;
        per_class(&self.class_sigma_factors, "class_sigma_factors")?;
        per_class(&self.class_weights, "class_weights")?;
        if !(self.hetero_decades >= 0.0 && self.hetero_decades.is_finite()) {
            return Err(invalid("hetero_decades must be >= 0"));
        }
        if !(self.classifier_accuracy > 0.0 && self.classifier_accuracy <= 1.0) {
            return Err(invalid("classifier_accuracy must be in (0, 1]"));
        }
        if !(self.prob_temperature > 0.0 && self.prob_temperature.is_finite()) {
            return Err(invalid("prob_temperature must be > 0"));
        }
        if !(0.0..1.0).contains(&self.corner_correlation) {
            return Err(invalid("corner_correlation must be in [0, 1)"));
        }
        if let Some(s) = self.shift {
            if !(s > 0.0 && s.is_finite()) {
                return Err(invalid("shift must be > 0"));
            }
        }
        match self.sigma_bias {
            SigmaBias::Identity => {}
            SigmaBias::Scale { factor } | SigmaBias::Power { factor, .. } if !(factor > 0.0) => {
                return Err(invalid("sigma_bias factor must be > 0"));
            }
            _ => {}
        }
        if !(self.min_box_size > 0.0 && self.min_box_size <= self.max_box_size) {
            return Err(invalid("need 0 < min_box_size <= max_box_size"));
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return Err(invalid("image dimensions must be > 0"));
        }
        Ok(())
    }

    fn per_class(v: &[f64], class: usize, default: f64) -> f64 {
        match v.len() {
            0 => default,
            1 => v[0],
            _ => v[class],
        }
    }
}

/// Generated records plus the true per-corner noise scale of each record.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleDataset {
    pub dataset: Dataset,
    pub true_scales: Vec<[f64; 4]>,
}

/// One line of the side-channel oracle file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleTruth {
    pub index: usize,
    pub true_scale: [f64; 4],
}

impl OracleDataset {
    pub fn truth(&self) -> impl Iterator<Item = OracleTruth> + '_ {
        self.true_scales
            .iter()
            .enumerate()
            .map(|(index, &true_scale)| OracleTruth { index, true_scale })
    }
}

fn sample_class(rng: &mut ChaCha8Rng, spec: &OracleSpec) -> usize {
    if spec.class_weights.len() == spec.n_classes && spec.n_classes > 1 {
        let total: f64 = spec.class_weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (k, w) in spec.class_weights.iter().enumerate() {
            if u < *w {
                return k;
            }
            u -= w;
        }
        spec.n_classes - 1
    } else {
        rng.random_range(0..spec.n_classes)
    }
}

/// Softmax of iid Gaussian logits, permuted so that the argmax is the true
/// class with probability `accuracy`. A miss gives the true class either the
/// runner-up logit or a uniformly chosen non-top one.
fn sample_probs(rng: &mut ChaCha8Rng, spec: &OracleSpec, gt: usize) -> Vec<f64> {
    let k = spec.n_classes;
    let mut logits: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
    let argmax = (0..k).fold(0, |b, j| if logits[j] > logits[b] { j } else { b });
    let correct = k == 1 || rng.random_bool(spec.classifier_accuracy);
    if correct {
        logits.swap(gt, argmax);
    } else if spec.near_miss_confusion {
        let second = (0..k)
            .filter(|&j| j != argmax)
            .fold(None, |b: Option<usize>, j| match b {
                Some(b) if logits[b] >= logits[j] => Some(b),
                _ => Some(j),
            })
            .expect("k >= 2");
        logits.swap(gt, second);
    } else if argmax == gt {
        let others: Vec<usize> = (0..k).filter(|&j| j != gt).collect();
        let j = *others.choose(rng).expect("k >= 2");
        logits.swap(gt, j);
    }
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| ((z - top) / spec.prob_temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Generates a dataset from `spec`, deterministically in `spec.seed`.
pub fn generate(spec: &OracleSpec) -> Result<OracleDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shift = spec.shift.unwrap_or(1.0);
    let rho = spec.corner_correlation;
    let mut records = Vec::with_capacity(spec.n_records);
    let mut true_scales = Vec::with_capacity(spec.n_records);

    for i in 0..spec.n_records {
        let gt_class = sample_class(&mut rng, spec);
        let base = OracleSpec::per_class(&spec.class_noise_scales, gt_class, 1.0);
        let hetero = 10f64.powf(rng.random::<f64>() * spec.hetero_decades);
        let scale = base * hetero;

        // Boxes must be large relative to the noise so predictions stay ordered.
        let lo = spec.min_box_size.max(10.0 * scale * shift);
        let hi = spec.max_box_size.max(lo);
        let w = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let h = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let x0 = rng.random::<f64>() * (spec.image_width - w).max(0.0);
        let y0 = rng.random::<f64>() * (spec.image_height - h).max(0.0);
        let gt = BoundingBox::new(x0, y0, x0 + w, y0 + h);

        let pred = loop {
            let common: f64 = rng.sample(StandardNormal);
            let g = gt.corners();
            let c: [f64; 4] = std::array::from_fn(|j| {
                let own: f64 = rng.sample(StandardNormal);
                let z = rho.sqrt() * common + (1.0 - rho).sqrt() * own;
                g[j] + shift * scale * z
            });
            let b = BoundingBox::from_corners(c);
            if b.is_ordered() {
                break b;
            }
        };

        let class_probs = sample_probs(&mut rng, spec, gt_class);
        let factor = OracleSpec::per_class(&spec.class_sigma_factors, gt_class, 1.0);
        let reported = spec.sigma_bias.apply(scale) * factor;

        records.push(DetectionRecord {
            image_id: format!("synthetic-{i:06}"),
            pred_box: pred,
            gt_box: gt,
            gt_class,
            class_probs,
            sigma: [reported; N_CORNERS],
        });
        true_scales.push([scale; N_CORNERS]);
    }
    Ok(OracleDataset {
        dataset: Dataset::new(records)?,
        true_scales,
    })
}
