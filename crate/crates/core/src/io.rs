//! File formats: JSONL detection records, JSON/CSV run reports, JSON
//! calibration maps and recovery curves.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::Calibrator;
use crate::error::{Error, Result};
use crate::model::{validate_record, BoundingBox, Dataset, DetectionRecord, N_CORNERS};
use crate::oracle::OracleDataset;
use crate::pipeline::{RecoveryPoint, RunReport, SignificanceRow};

/// Record as it appears on a line, before arity checks.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    image_id: String,
    pred_box: Vec<f64>,
    gt_box: Vec<f64>,
    gt_class: i64,
    class_probs: Vec<f64>,
    sigma: Vec<f64>,
}

fn four(field: &str, v: &[f64]) -> Result<[f64; 4], String> {
    <[f64; 4]>::try_from(v).map_err(|_| format!("{field} has {} entries, expected {N_CORNERS}", v.len()))
}

impl RawRecord {
    fn into_record(self) -> Result<DetectionRecord, String> {
        let gt_class = usize::try_from(self.gt_class).map_err(|_| format!("gt_class {} is negative", self.gt_class))?;
        Ok(DetectionRecord {
            image_id: self.image_id,
            pred_box: BoundingBox::from_corners(four("pred_box", &self.pred_box)?),
            gt_box: BoundingBox::from_corners(four("gt_box", &self.gt_box)?),
            gt_class,
            class_probs: self.class_probs,
            sigma: four("sigma", &self.sigma)?,
        })
    }
}

/// A line that failed validation and was left out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejection {
    pub line: usize,
    pub rule: String,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dataset: Dataset,
    /// Rejected lines (always empty in strict mode, which fails instead).
    pub rejected: Vec<Rejection>,
}

/// Parses JSONL records from `text`. Blank lines are skipped.
///
/// Malformed JSON is always fatal. Records that parse but violate a rule
/// (box arity or ordering, probabilities, class range, sigma, a class count
/// differing from the first record) abort in `strict` mode and are rejected
/// otherwise.
pub fn parse_dataset(text: &str, strict: bool) -> Result<LoadedDataset> {
    let mut records = Vec::new();
    let mut rejected = Vec::new();
    let mut n_classes: Option<usize> = None;
    let mut seen_any = false;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        seen_any = true;
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let verdict = raw.into_record().and_then(|r| {
            if let Some(v) = validate_record(&r).into_iter().next() {
                return Err(v.to_string());
            }
            match n_classes {
                Some(k) if k != r.n_classes() => {
                    Err(format!("class_probs has {} entries, earlier records have {k}", r.n_classes()))
                }
                _ => Ok(r),
            }
        });
        match verdict {
            Ok(r) => {
                n_classes.get_or_insert(r.n_classes());
                records.push(r);
            }
            Err(rule) if strict => return Err(Error::Validation { line: line_no, rule }),
            Err(rule) => {
                log::warn!("line {line_no}: rejected ({rule})");
                rejected.push(Rejection { line: line_no, rule });
            }
        }
    }
    if !seen_any {
        return Err(Error::EmptyFile);
    }
    if records.is_empty() {
        let first = rejected.swap_remove(0);
        return Err(Error::Validation {
            line: first.line,
            rule: first.rule,
        });
    }
    Ok(LoadedDataset {
        dataset: Dataset::new(records)?,
        rejected,
    })
}

pub fn load_dataset(path: &Path, strict: bool) -> Result<LoadedDataset> {
    parse_dataset(&fs::read_to_string(path)?, strict)
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    fs::write(path, jsonl(records)?)?;
    Ok(())
}

/// Writes the records and, if `truth_path` is given, the per-record true
/// noise scales (`{"index": i, "true_scale": [..]}` per line).
pub fn write_oracle(data: &OracleDataset, records_path: &Path, truth_path: Option<&Path>) -> Result<()> {
    write_records(records_path, data.dataset.records())?;
    if let Some(p) = truth_path {
        fs::write(p, jsonl(data.truth())?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Formats `x` with `digits` significant digits, `%g` style.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if exp < -4 || exp >= digits as i32 {
        format!("{}e{}", trim(mantissa), exp)
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim(&format!("{:.*}", decimals, x))
    }
}

pub const CSV_HEADER: &str =
    "regime,run,seed,coverage,mean_iou,interval_score,mean_set_size,class_coverage,joint_coverage,n_eval";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format_sig(x, 6)).unwrap_or_default()
}

fn regime_name(report: &RunReport) -> String {
    serde_json::to_value(report.config.regime)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// One row per run plus a final `aggregate` row of run means.
pub fn report_csv(report: &RunReport) -> String {
    let regime = regime_name(report);
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in &report.per_run {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{regime},{},{},{},{},{},{},{},{},{}",
            r.run,
            r.seed,
            format_sig(m.coverage, 6),
            format_sig(m.mean_iou, 6),
            format_sig(m.interval_score, 6),
            opt(m.mean_set_size),
            opt(m.class_coverage),
            opt(m.joint_coverage),
            m.n_eval
        );
    }
    let a = &report.aggregate;
    let mean_n_eval = if report.per_run.is_empty() {
        0.0
    } else {
        report.per_run.iter().map(|r| r.metrics.n_eval as f64).sum::<f64>() / report.per_run.len() as f64
    };
    let _ = writeln!(
        out,
        "{regime},aggregate,,{},{},{},{},{},{},{}",
        format_sig(a.coverage.mean, 6),
        format_sig(a.mean_iou.mean, 6),
        format_sig(a.interval_score.mean, 6),
        opt(a.mean_set_size.map(|s| s.mean)),
        opt(a.class_coverage.map(|s| s.mean)),
        opt(a.joint_coverage.map(|s| s.mean)),
        format_sig(mean_n_eval, 6)
    );
    out
}

pub fn report_json(report: &RunReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

pub fn emit_report(report: &RunReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Json => report_json(report)?,
        ReportFormat::Csv => report_csv(report),
    };
    fs::write(path, text)?;
    Ok(())
}

fn parse_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn load_report(path: &Path) -> Result<RunReport> {
    parse_json(&fs::read_to_string(path)?)
}

pub fn save_calibrator(calibrator: &Calibrator, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(calibrator)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn load_calibrator(path: &Path) -> Result<Calibrator> {
    parse_json(&fs::read_to_string(path)?)
}

pub const SIGNIFICANCE_HEADER: &str = "metric,mean_a,mean_b,mean_diff,t,p,significant_1pct,significant_5pct";

pub fn significance_csv(rows: &[SignificanceRow]) -> String {
    let mut out = format!("{SIGNIFICANCE_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.metric,
            format_sig(r.mean_a, 6),
            format_sig(r.mean_b, 6),
            format_sig(r.mean_diff, 6),
            format_sig(r.t, 6),
            format_sig(r.p, 6),
            r.significant_1pct,
            r.significant_5pct
        );
    }
    out
}

pub const RECOVERY_HEADER: &str = "method,alpha_corner,iou_threshold,n_below,n_recovered,rate";

pub fn recovery_csv(points: &[RecoveryPoint]) -> String {
    let mut out = format!("{RECOVERY_HEADER}\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            p.method,
            format_sig(p.alpha_corner, 6),
            format_sig(p.iou_threshold, 6),
            p.n_below,
            p.n_recovered,
            opt(p.rate)
        );
    }
    out
}
