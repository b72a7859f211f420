use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of run `run` under `master_seed`. Each run can be reproduced on its
/// own without replaying earlier runs.
pub fn derive_seed(master_seed: u64, run: u64) -> u64 {
    mix(mix(master_seed) ^ run.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Calibration/evaluation partition of record indices (both sorted).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub calibration: Vec<usize>,
    pub evaluation: Vec<usize>,
    /// Classes with fewer than `min_per_class` calibration records or with
    /// no evaluation records (stratified splits only).
    pub flagged: Vec<usize>,
}

/// Calibration share of `n` records: `round(n * fraction)`, kept within
/// `[1, n - 1]` so both sides are non-empty when `n >= 2`. A single record
/// goes to evaluation.
pub fn calibration_count(n: usize, fraction: f64) -> usize {
    if n < 2 {
        return 0;
    }
    ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
}

/// Random split of `dataset`, deterministic in `seed`.
///
/// In stratified mode each ground-truth class is split separately at
/// `fraction`; a class with a single record puts it in calibration. A class
/// with no records at all cannot be calibrated and is an error.
pub fn random_split(
    dataset: &Dataset,
    fraction: f64,
    seed: u64,
    stratified: bool,
    min_per_class: usize,
) -> Result<DatasetSplit> {
    if dataset.is_empty() {
        return Err(Error::EmptyFile);
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::OutOfRange {
            name: "calib_fraction",
            value: fraction,
            range: "(0, 1)",
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut calibration = Vec::new();
    let mut evaluation = Vec::new();
    let mut flagged = Vec::new();

    if stratified {
        let k = dataset.n_classes();
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, r) in dataset.records().iter().enumerate() {
            by_class[r.gt_class].push(i);
        }
        for (class, mut idx) in by_class.into_iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::StratificationImpossible { class });
            }
            idx.shuffle(&mut rng);
            let n_cal = if idx.len() == 1 { 1 } else { calibration_count(idx.len(), fraction) };
            if n_cal < min_per_class || n_cal == idx.len() {
                flagged.push(class);
            }
            evaluation.extend_from_slice(&idx[n_cal..]);
            calibration.extend_from_slice(&idx[..n_cal]);
        }
    } else {
        let mut idx: Vec<usize> = (0..dataset.len()).collect();
        idx.shuffle(&mut rng);
        let n_cal = calibration_count(idx.len(), fraction);
        evaluation.extend_from_slice(&idx[n_cal..]);
        calibration.extend_from_slice(&idx[..n_cal]);
    }
    calibration.sort_unstable();
    evaluation.sort_unstable();
    Ok(DatasetSplit {
        calibration,
        evaluation,
        flagged,
    })
}

/// Splits calibration indices into two class-balanced halves (alternating
/// within each class), for fitting the two heads on disjoint data. Classes
/// with one record go to the second half.
pub fn disjoint_halves(dataset: &Dataset, calibration: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut seen = vec![0usize; dataset.n_classes()];
    let mut counts = vec![0usize; dataset.n_classes()];
    for &i in calibration {
        counts[dataset.records()[i].gt_class] += 1;
    }
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for &i in calibration {
        let k = dataset.records()[i].gt_class;
        if counts[k] > 1 && seen[k].is_multiple_of(2) {
            first.push(i);
        } else {
            second.push(i);
        }
        seen[k] += 1;
    }
    (first, second)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BoundingBox, DetectionRecord};

    fn dataset(classes: &[usize], k: usize) -> Dataset {
        let records = classes
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let mut probs = vec![0.0; k];
                probs[c] = 1.0;
                DetectionRecord {
                    image_id: format!("{i}"),
                    pred_box: BoundingBox::new(0.0, 0.0, 10.0, 10.0),
                    gt_box: BoundingBox::new(0.0, 0.0, 10.0, 10.0),
                    gt_class: c,
                    class_probs: probs,
                    sigma: [1.0; 4],
                }
            })
            .collect();
        Dataset::new(records).unwrap()
    }

    #[test]
    fn sizes_and_determinism() {
        let d = dataset(&[0; 10], 1);
        let a = random_split(&d, 0.8, 7, false, 0).unwrap();
        assert_eq!((a.calibration.len(), a.evaluation.len()), (8, 2));
        assert_eq!(a, random_split(&d, 0.8, 7, false, 0).unwrap());
        let mut all: Vec<usize> = a.calibration.iter().chain(&a.evaluation).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn single_record_goes_to_evaluation() {
        let d = dataset(&[0], 1);
        let s = random_split(&d, 0.8, 1, false, 0).unwrap();
        assert!(s.calibration.is_empty());
        assert_eq!(s.evaluation, vec![0]);
    }

    #[test]
    fn stratified_singleton_class_is_calibrated_and_flagged() {
        let mut classes = vec![0; 20];
        classes.push(1);
        let d = dataset(&classes, 2);
        let s = random_split(&d, 0.8, 3, true, 0).unwrap();
        assert!(s.calibration.contains(&20));
        assert!(!s.evaluation.contains(&20));
        assert_eq!(s.flagged, vec![1]);
        assert_eq!(s.calibration.len(), 17);
    }

    #[test]
    fn stratified_missing_class_is_an_error() {
        let d = dataset(&[0, 0, 0, 2], 3);
        assert!(matches!(
            random_split(&d, 0.8, 0, true, 0),
            Err(Error::StratificationImpossible { class: 1 })
        ));
    }

    #[test]
    fn stratified_keeps_class_proportions() {
        let classes: Vec<usize> = (0..100).map(|i| usize::from(i % 4 == 0)).collect();
        let d = dataset(&classes, 2);
        let s = random_split(&d, 0.8, 11, true, 0).unwrap();
        let cal1 = s.calibration.iter().filter(|&&i| classes[i] == 1).count();
        assert_eq!(cal1, 20);
        assert_eq!(s.calibration.len(), 80);
    }

    #[test]
    fn seeds_differ_across_runs() {
        let seeds: std::collections::BTreeSet<u64> = (0..1000).map(|r| derive_seed(42, r)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }

    #[test]
    fn halves_are_disjoint_and_cover() {
        let d = dataset(&[0, 0, 0, 1, 1, 2], 3);
        let (a, b) = disjoint_halves(&d, &[0, 1, 2, 3, 4, 5]);
        assert_eq!(a, vec![0, 2, 3]);
        assert_eq!(b, vec![1, 4, 5]);
    }
}
