mod args;

use std::path::Path;
use std::process::ExitCode;

use clap::Parser;

use args::{CalibrateArgs, Cli, Command, CompareArgs, ExperimentArgs, MethodArg, OutputArgs, RecoveryArgs, RunArgs, SimulateArgs};
use confdet::calibration::{fit_calibrator, CalibrationScope, CalibratorOptions};
use confdet::classification::RapsConfig;
use confdet::io::{self, ReportFormat};
use confdet::oracle::{self, OracleSpec, SigmaBias};
use confdet::pipeline::{self, RunConfig, RunReport};
use confdet::regression::Scaling;
use confdet::{BoundingBox, Dataset, Error, MiscoverageConfig, Parallelism, Result};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let par = Parallelism::resolve(cli.workers);

    let result = std::panic::catch_unwind(|| match cli.command {
        Command::Run(a) => cmd_run(a, par),
        Command::Simulate(a) => cmd_simulate(a, par),
        Command::Compare(a) => cmd_compare(a),
        Command::CalibrateSigma(a) => cmd_calibrate(a),
        Command::Recovery(a) => cmd_recovery(a, par),
    });
    match result {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { EXIT_DATA } else { EXIT_INTERNAL })
        }
        Err(_) => ExitCode::from(EXIT_INTERNAL),
    }
}

fn run_config(a: &ExperimentArgs, seed: u64) -> Result<RunConfig> {
    let image_bounds = a.image_bounds.as_ref().map(|v| BoundingBox::new(v[0], v[1], v[2], v[3]));
    let regime = a.regime.into();
    let config = RunConfig {
        n_runs: a.runs,
        calib_fraction: a.calib_frac,
        miscoverage: MiscoverageConfig::new(a.alpha_corner, a.alpha_class)?,
        scaling: a.scaling.into(),
        calibration_scope: a.scope.into(),
        calibrator_options: CalibratorOptions {
            pool_corners: !a.per_corner,
        },
        calibrator_fit_fraction: a.calib_fit_frac,
        regime,
        raps: RapsConfig {
            penalty_a: a.raps_a,
            threshold_b: a.raps_b,
            ..RapsConfig::default()
        },
        master_seed: seed,
        image_bounds,
        min_per_class: a.min_per_class,
        stratified: a.stratified || regime.needs_stratification(),
        disjoint_heads: a.disjoint_heads,
    };
    config.validate()?;
    Ok(config)
}

fn load(path: &Path, strict: bool) -> Result<Dataset> {
    let loaded = io::load_dataset(path, strict)?;
    if !loaded.rejected.is_empty() {
        let lines: Vec<String> = loaded.rejected.iter().map(|r| r.line.to_string()).collect();
        eprintln!(
            "{}: skipped {} invalid records (lines {})",
            path.display(),
            loaded.rejected.len(),
            lines.join(", ")
        );
    }
    Ok(loaded.dataset)
}

fn summary(report: &RunReport) -> String {
    let a = &report.aggregate;
    let mut s = format!(
        "runs {}  coverage {:.4} (sd {:.4})  IoU {:.4}  interval score {:.1}",
        a.n_runs, a.coverage.mean, a.coverage.std, a.mean_iou.mean, a.interval_score.mean
    );
    if let Some(m) = a.mean_set_size {
        s.push_str(&format!("  set size {:.3}", m.mean));
    }
    for c in a.checks.iter().filter(|c| c.below_nominal) {
        s.push_str(&format!(
            "\nbelow nominal: {} {:.4} < {:.4} (se {:.4})",
            c.metric, c.observed, c.nominal, c.standard_error
        ));
    }
    s
}

fn write_outputs(report: &RunReport, out: &OutputArgs) -> Result<()> {
    if out.json.is_none() && out.csv.is_none() {
        print!("{}", io::report_json(report)?);
        return Ok(());
    }
    if let Some(p) = &out.json {
        io::emit_report(report, ReportFormat::Json, p)?;
    }
    if let Some(p) = &out.csv {
        io::emit_report(report, ReportFormat::Csv, p)?;
    }
    eprintln!("{}", summary(report));
    Ok(())
}

fn cmd_run(a: RunArgs, par: Parallelism) -> Result<()> {
    let config = run_config(&a.experiment, a.seed)?;
    let cal = load(&a.input, a.experiment.strict)?;
    let eval = a.eval_input.as_deref().map(|p| load(p, a.experiment.strict)).transpose()?;
    let report = pipeline::run_experiment(&cal, eval.as_ref(), &config, par)?;
    write_outputs(&report, &a.output)
}

fn oracle_spec(a: &SimulateArgs) -> Result<OracleSpec> {
    if let Some(p) = &a.spec {
        let text = std::fs::read_to_string(p)?;
        return serde_json::from_str(&text).map_err(|e| Error::InvalidSpec(e.to_string()));
    }
    Ok(OracleSpec {
        n_records: a.records,
        n_classes: a.classes,
        class_noise_scales: a.noise_scales.clone(),
        hetero_decades: a.hetero_decades,
        sigma_bias: if a.sigma_factor == 1.0 {
            SigmaBias::Identity
        } else {
            SigmaBias::Scale { factor: a.sigma_factor }
        },
        classifier_accuracy: a.accuracy,
        prob_temperature: a.temperature,
        corner_correlation: a.corner_correlation,
        seed: a.seed,
        ..OracleSpec::default()
    })
}

fn cmd_simulate(a: SimulateArgs, par: Parallelism) -> Result<()> {
    let config = run_config(&a.experiment, a.seed)?;
    let spec = oracle_spec(&a)?;
    let shift = a.shift.or(spec.shift);
    // Calibration data is always unshifted; a shift only affects a separately
    // generated evaluation set.
    let base = OracleSpec { shift: None, ..spec };
    let data = oracle::generate(&base)?;
    if let Some(p) = &a.write_data {
        io::write_oracle(&data, p, a.write_truth.as_deref())?;
    }
    let shifted = match shift {
        Some(s) => {
            let eval_spec = OracleSpec {
                shift: Some(s),
                seed: base.seed.wrapping_add(1),
                ..base.clone()
            };
            let e = oracle::generate(&eval_spec)?;
            if let Some(p) = &a.write_eval {
                io::write_records(p, e.dataset.records())?;
            }
            Some(e.dataset)
        }
        None => None,
    };
    let report = pipeline::run_experiment(&data.dataset, shifted.as_ref(), &config, par)?;
    write_outputs(&report, &a.output)
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let ra = io::load_report(&a.a)?;
    let rb = io::load_report(&a.b)?;
    let rows = pipeline::compare_reports(&ra, &rb)?;
    let text = io::significance_csv(&rows);
    match &a.csv {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<()> {
    let data = load(&a.input, a.strict)?;
    let options = CalibratorOptions {
        pool_corners: !a.per_corner,
    };
    let cal = fit_calibrator(data.records(), a.scope.into(), options)?;
    io::save_calibrator(&cal, &a.output)
}

fn method(m: MethodArg) -> (Scaling, CalibrationScope) {
    match m {
        MethodArg::Unscaled => (Scaling::Unscaled, CalibrationScope::Raw),
        MethodArg::Scaled => (Scaling::Scaled, CalibrationScope::Raw),
        MethodArg::RelIr => (Scaling::Scaled, CalibrationScope::GlobalRelative),
        MethodArg::RelIrPcoPc => (Scaling::Scaled, CalibrationScope::PerCoordinatePerClassRelative),
    }
}

fn cmd_recovery(a: RecoveryArgs, par: Parallelism) -> Result<()> {
    let config = run_config(&a.experiment, a.seed)?;
    let cal = load(&a.input, a.experiment.strict)?;
    let eval = a.eval_input.as_deref().map(|p| load(p, a.experiment.strict)).transpose()?;
    let methods: Vec<_> = a.methods.iter().map(|&m| method(m)).collect();
    let points = pipeline::recovery_sweep(&cal, eval.as_ref(), &config, &methods, &a.alphas, &a.thresholds, par)?;
    std::fs::write(&a.output, io::recovery_csv(&points))?;
    Ok(())
}
