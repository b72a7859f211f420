use confdet::calibration::{fit_calibrator, CalibrationScope, CalibratorOptions};
use confdet::io::{
    emit_report, load_calibrator, load_dataset, load_report, parse_dataset, report_csv, save_calibrator,
    write_oracle, ReportFormat, CSV_HEADER,
};
use confdet::oracle::{generate, OracleSpec};
use confdet::pipeline::{run_experiment, Regime, RunConfig};
use confdet::regression::Scaling;
use confdet::{Error, Parallelism};
use tempfile::tempdir;

fn spec() -> OracleSpec {
    OracleSpec {
        n_records: 500,
        n_classes: 3,
        class_noise_scales: vec![2.0, 4.0, 7.0],
        hetero_decades: 1.0,
        seed: 99,
        ..OracleSpec::default()
    }
}

fn two_step_report() -> confdet::pipeline::RunReport {
    let data = generate(&spec()).unwrap().dataset;
    let cfg = RunConfig {
        n_runs: 8,
        regime: Regime::TwoStep,
        stratified: true,
        scaling: Scaling::Scaled,
        master_seed: 5,
        ..RunConfig::default()
    };
    run_experiment(&data, None, &cfg, Parallelism::Sequential).unwrap()
}

#[test]
fn oracle_files_reload_without_rejections() {
    let dir = tempdir().unwrap();
    let data = generate(&spec()).unwrap();
    let records = dir.path().join("records.jsonl");
    let truth = dir.path().join("truth.jsonl");
    write_oracle(&data, &records, Some(&truth)).unwrap();

    let loaded = load_dataset(&records, true).unwrap();
    assert!(loaded.rejected.is_empty());
    assert_eq!(loaded.dataset, data.dataset);
    let truth_lines = std::fs::read_to_string(&truth).unwrap();
    assert_eq!(truth_lines.lines().count(), 500);
    assert!(truth_lines.lines().next().unwrap().starts_with("{\"index\":0,"));
}

#[test]
fn report_json_roundtrip_is_exact() {
    let report = two_step_report();
    let dir = tempdir().unwrap();
    let path = dir.path().join("report.json");
    emit_report(&report, ReportFormat::Json, &path).unwrap();
    let back = load_report(&path).unwrap();
    assert_eq!(back, report);

    let again = dir.path().join("again.json");
    emit_report(&back, ReportFormat::Json, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn csv_has_one_row_per_run_plus_aggregate() {
    let report = two_step_report();
    let csv = report_csv(&report);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 1 + 8 + 1);
    let width = CSV_HEADER.split(',').count();
    assert!(lines.iter().all(|l| l.split(',').count() == width));
    assert!(lines[1].starts_with("two_step,0,"));
    assert!(lines[9].starts_with("two_step,aggregate,"));
    // same report, same bytes
    assert_eq!(csv, report_csv(&two_step_report()));
}

#[test]
fn calibrator_roundtrip() {
    let data = generate(&spec()).unwrap().dataset;
    let dir = tempdir().unwrap();
    for scope in [CalibrationScope::GlobalRelative, CalibrationScope::PerCoordinatePerClassRelative] {
        let cal = fit_calibrator(data.records(), scope, CalibratorOptions::default()).unwrap();
        let path = dir.path().join("cal.json");
        save_calibrator(&cal, &path).unwrap();
        assert_eq!(load_calibrator(&path).unwrap(), cal);
    }
}

#[test]
fn non_strict_loading_skips_and_reports_lines() {
    let good = r#"{"image_id":"a","pred_box":[0,0,10,10],"gt_box":[1,1,11,11],"gt_class":0,"class_probs":[0.7,0.3],"sigma":[1,1,1,1]}"#;
    let bad_order = r#"{"image_id":"b","pred_box":[10,0,0,10],"gt_box":[1,1,11,11],"gt_class":0,"class_probs":[0.7,0.3],"sigma":[1,1,1,1]}"#;
    let bad_k = r#"{"image_id":"c","pred_box":[0,0,10,10],"gt_box":[1,1,11,11],"gt_class":0,"class_probs":[0.2,0.3,0.5],"sigma":[1,1,1,1]}"#;
    let text = format!("{good}\n{bad_order}\n\n{bad_k}\n{good}\n");
    let loaded = parse_dataset(&text, false).unwrap();
    assert_eq!(loaded.dataset.len(), 2);
    let lines: Vec<usize> = loaded.rejected.iter().map(|r| r.line).collect();
    assert_eq!(lines, vec![2, 4]);
    assert!(matches!(parse_dataset(&text, true), Err(Error::Validation { line: 2, .. })));
}

#[test]
fn unreadable_inputs() {
    assert!(matches!(parse_dataset("\n  \n", false), Err(Error::EmptyFile)));
    assert!(matches!(parse_dataset("{\"image_id\":", false), Err(Error::Parse { line: 1, .. })));
    let unknown = r#"{"image_id":"a","pred_box":[0,0,10,10],"gt_box":[1,1,11,11],"gt_class":0,"class_probs":[1.0],"sigma":[1,1,1,1],"extra":1}"#;
    assert!(matches!(parse_dataset(unknown, false), Err(Error::Parse { .. })));
    let dir = tempdir().unwrap();
    let err = load_dataset(&dir.path().join("missing.jsonl"), false).unwrap_err();
    assert!(err.is_data_error());
    std::fs::write(dir.path().join("r.json"), "{}").unwrap();
    assert!(load_report(&dir.path().join("r.json")).is_err());
}
