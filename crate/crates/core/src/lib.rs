//! Split conformal prediction for multi-class object detection.
//!
//! Turns matched detector outputs (predicted box, ground truth, class
//! probabilities, per-corner sigma) into conformal boxes and class prediction
//! sets, and evaluates them over many seeded calibration/evaluation splits.
//!
//! - [`regression`]: corner scores, conformal quantiles, conformal boxes
//! - [`classification`]: APS/RAPS scores and prediction sets
//! - [`calibration`]: relative isotonic calibration of sigma
//! - [`metrics`]: coverage, IoU, interval score, paired t-test
//! - [`pipeline`]: the multi-split experiment harness
//! - [`oracle`]: synthetic data with known noise for coverage checks
//! - [`io`]: JSONL input, JSON/CSV reports

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod classification;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod parallel;
pub mod pipeline;
pub mod regression;
mod serde_util;

pub use error::{Error, Result};
pub use model::{
    validate_record, BoundingBox, ConformalBox, Dataset, DetectionRecord, Group, Interval,
    MiscoverageConfig, QuantileTable,
};
pub use parallel::Parallelism;
