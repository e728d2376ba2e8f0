//! Orchestration of the three run modes and the post-processing commands.

use std::path::{Path, PathBuf};

use dualspin::analysis::{
    allan_deviation_with, detect_features, log_tau_grid, mean_spacing, paired_t_test,
    rescale_to_rotation, stability_report, AllanCurve, AllanOptions, Feature, StabilityReport,
};
use dualspin::control::FeedbackState;
use dualspin::control::{
    predictor_study, Controller, CrossSensorFeedback, ErrorGrid, NoFeedback, StudyConfig,
};
use dualspin::environment::{stream_seed, FieldTrajectory};
use dualspin::estimation::{sensitivity, slope_calibration, SlopeCalibration};
use dualspin::protocol::{
    run_experiment, BlockRunner, ExperimentRun, ProtocolError, SequenceConfig,
};
use dualspin::spinmodel::Spin;
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{
    ConfigError, ControllerKind, ExperimentConfig, Mode, ReadoutSetup, SeriesKind, VariantConfig,
};
use crate::io::{self, IoError, ReadoutSummary, RunManifest, RunStatus, VariantSummary};

// stdout writes that tolerate a closed pipe
macro_rules! outln {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

const FIELD_STREAM: u64 = 0x6669656c64;
const VARIANT_STREAM: u64 = 0x76617269616e74;
const STUDY_STREAM: u64 = 0x7374756479;
const SWEEP_STREAM: u64 = 0x7377656570;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::MissingColumn { .. }
            | IoError::NoTimeColumn { .. }
            | IoError::BadNumber { .. } => CliError::Input(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Field trajectory of a run; its seed mixes the run seed and `field.seed`.
pub fn trajectory(config: &ExperimentConfig) -> Result<FieldTrajectory, CliError> {
    let spec =
        config
            .field
            .clone()
            .with_seed(stream_seed(config.seed, FIELD_STREAM, config.field.seed));
    FieldTrajectory::new(spec).map_err(runtime)
}

fn controller(config: &ExperimentConfig, v: &VariantConfig) -> Box<dyn Controller> {
    match v.controller {
        ControllerKind::None => Box::new(NoFeedback),
        ControllerKind::Feedback => Box::new(
            CrossSensorFeedback::new(&config.params, &config.sequence, v.gain)
                .with_predictor(v.predictor_degree)
                .with_history_capacity(v.history_capacity)
                .with_tolerance(v.tolerance),
        ),
    }
}

/// Runs every variant against the shared field realization.
pub fn simulate(
    config: &ExperimentConfig,
) -> Result<Vec<Result<ExperimentRun, ProtocolError>>, CliError> {
    let traj = trajectory(config)?;
    Ok(config
        .variants
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let mut ctrl = controller(config, v);
            run_experiment(
                &config.params,
                &config.sequence,
                &traj,
                &config.noise,
                ctrl.as_mut(),
                config.duration,
                stream_seed(config.seed, VARIANT_STREAM, i as u64),
            )
        })
        .collect())
}

pub fn series(run: &ExperimentRun, kind: SeriesKind) -> Result<Vec<(f64, f64)>, CliError> {
    match kind {
        SeriesKind::Blocks => run.contrast_series(),
        SeriesKind::Segments => run.segment_series(),
    }
    .map_err(runtime)
}

/// Allan curve of a series with the configured grid and options.
pub fn allan(config: &ExperimentConfig, series: &[(f64, f64)]) -> Result<AllanCurve, CliError> {
    let options = AllanOptions {
        overlapping: config.analysis.overlapping,
        convention: config.analysis.convention,
    };
    let taus = if config.analysis.taus.is_empty() {
        let dt = mean_spacing(series).map_err(runtime)?;
        log_tau_grid(dt, dt * series.len() as f64, config.analysis.per_decade)
    } else {
        config.analysis.taus.clone()
    };
    allan_deviation_with(series, &taus, options).map_err(runtime)
}

/// Contrast per deg/s: the configured value, or a phase-sweep calibration.
pub fn scale_factor(config: &ExperimentConfig) -> Result<f64, CliError> {
    if config.analysis.scale_s > 0.0 {
        return Ok(config.analysis.scale_s);
    }
    slope_calibration(&config.params, &config.sequence)
        .map(|c| c.slope)
        .map_err(runtime)
}

#[derive(Debug)]
pub struct VariantOutcome {
    pub name: String,
    pub run: ExperimentRun,
    pub curve: AllanCurve,
    pub features: Vec<Feature>,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub manifest: RunManifest,
    pub variants: Vec<VariantOutcome>,
    /// First variant against each later one.
    pub reports: Vec<(String, StabilityReport)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StabilityJson {
    reference: String,
    comparisons: Vec<(String, StabilityReport)>,
    features: Vec<(String, Vec<Feature>)>,
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn summary(name: &str, run: &ExperimentRun) -> VariantSummary {
    VariantSummary {
        name: name.to_string(),
        blocks: run.records.len(),
        t_start: run.records.first().map_or(0.0, |r| r.t_start),
        t_end: run.records.last().map_or(0.0, |r| r.t_start),
        decisions: run.decisions.clone(),
    }
}

/// Experiment mode; writes artifacts to `out` when given.
pub fn run_experiment_mode(
    config: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<ExperimentOutcome, CliError> {
    if let Some(dir) = out {
        ensure_dir(dir)?;
    }
    let mut manifest = RunManifest::new(config);
    let results = simulate(config)?;

    let mut failure = None;
    let mut runs = Vec::with_capacity(results.len());
    for (v, result) in config.variants.iter().zip(results) {
        match result {
            Ok(run) => runs.push((v.name.clone(), run)),
            Err(ProtocolError::Aborted { partial, source }) => {
                failure.get_or_insert(format!("variant `{}` aborted: {source}", v.name));
                runs.push((v.name.clone(), *partial));
            }
            Err(e) => {
                failure.get_or_insert(format!("variant `{}`: {e}", v.name));
            }
        }
    }

    if let Some(dir) = out {
        for (name, run) in &runs {
            let records = format!("records_{name}.csv");
            io::write_records(&dir.join(&records), &run.records)?;
            manifest.outputs.insert(format!("records.{name}"), records);
            if config.analysis.series == SeriesKind::Segments {
                let segs = format!("segments_{name}.csv");
                io::write_segments(&dir.join(&segs), &run.records)?;
                manifest.outputs.insert(format!("segments.{name}"), segs);
            }
        }
    }
    manifest.variants = runs.iter().map(|(n, r)| summary(n, r)).collect();

    if let Some(reason) = failure {
        manifest.status = RunStatus::Aborted {
            reason: reason.clone(),
        };
        if let Some(dir) = out {
            manifest.write(dir)?;
        }
        return Err(CliError::Runtime(reason));
    }

    let s = scale_factor(config)?;
    manifest.scale_s = Some(s);
    let mut variants = Vec::with_capacity(runs.len());
    for (name, run) in runs {
        let data = series(&run, config.analysis.series)?;
        let curve = rescale_to_rotation(&allan(config, &data)?, s).map_err(runtime)?;
        let features = detect_features(&curve, config.analysis.white_points).unwrap_or_default();
        if let Some(dir) = out {
            let file = format!("allan_{name}.csv");
            io::write_allan(&dir.join(&file), &curve)?;
            manifest.outputs.insert(format!("allan.{name}"), file);
        }
        variants.push(VariantOutcome {
            name,
            run,
            curve,
            features,
        });
    }

    let mut reports = Vec::new();
    if let Some((first, rest)) = variants.split_first() {
        for other in rest {
            match stability_report(&first.curve, &other.curve) {
                Ok(r) => reports.push((other.name.clone(), r)),
                Err(e) => log::warn!("no stability report for `{}`: {e}", other.name),
            }
        }
    }
    if let Some(dir) = out {
        let json = StabilityJson {
            reference: variants.first().map(|v| v.name.clone()).unwrap_or_default(),
            comparisons: reports.clone(),
            features: variants
                .iter()
                .map(|v| (v.name.clone(), v.features.clone()))
                .collect(),
        };
        io::write_json(&dir.join("stability.json"), &json)?;
        manifest
            .outputs
            .insert("stability".into(), "stability.json".into());
        manifest.write(dir)?;
    }
    Ok(ExperimentOutcome {
        manifest,
        variants,
        reports,
    })
}

/// Per (noise, degree ≥ 1): paired two-sided test of the degree's
/// realization errors against degree 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeTest {
    pub noise_amplitude: f64,
    pub degree: usize,
    pub mean_error: f64,
    pub baseline_error: f64,
    pub t: f64,
    pub p: f64,
    /// Significantly lower error than degree 0 at α = 0.05.
    pub improves: bool,
}

pub const ALPHA: f64 = 0.05;

pub fn degree_tests(grid: &ErrorGrid) -> Vec<DegreeTest> {
    let Some(base) = grid.col(0) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for (row, &noise) in grid.noise_amplitudes.iter().enumerate() {
        for (col, &degree) in grid.degrees.iter().enumerate() {
            if col == base {
                continue;
            }
            let a = &grid.per_realization[row][col];
            let b = &grid.per_realization[row][base];
            let (t, p) = paired_t_test(a, b).unwrap_or((f64::NAN, f64::NAN));
            let mean_error = grid.mean_error[row][col];
            let baseline_error = grid.mean_error[row][base];
            out.push(DegreeTest {
                noise_amplitude: noise,
                degree,
                mean_error,
                baseline_error,
                t,
                p,
                improves: p < ALPHA && mean_error < baseline_error,
            });
        }
    }
    out
}

pub fn study_config(config: &ExperimentConfig) -> StudyConfig {
    StudyConfig {
        seed: stream_seed(config.seed, STUDY_STREAM, config.study.seed),
        ..config.study.clone()
    }
}

pub fn run_study_mode(
    config: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<(ErrorGrid, Vec<DegreeTest>), CliError> {
    let grid = predictor_study(&study_config(config)).map_err(runtime)?;
    let tests = degree_tests(&grid);
    if let Some(dir) = out {
        ensure_dir(dir)?;
        let mut manifest = RunManifest::new(config);
        io::write_error_grid(&dir.join("error_grid.csv"), &grid)?;
        io::write_json(&dir.join("study_tests.json"), &tests)?;
        manifest
            .outputs
            .insert("error_grid".into(), "error_grid.csv".into());
        manifest
            .outputs
            .insert("tests".into(), "study_tests.json".into());
        manifest.write(dir)?;
    }
    Ok((grid, tests))
}

/// Sequence settings of one sweep readout.
pub fn readout_sequence(config: &ExperimentConfig, setup: &ReadoutSetup) -> SequenceConfig {
    let mut seq = SequenceConfig {
        spin: setup.spin,
        use_mapping: setup.use_mapping,
        ..config.sequence.clone()
    };
    seq.t_ramsey = setup.t_ramsey.unwrap_or(match setup.spin {
        Spin::Nuclear => config.sequence.t_ramsey,
        Spin::Electronic => config.params.t2e_star,
    });
    if let Some(len) = setup.sequence_length {
        seq.sequence_length = len;
    }
    seq
}

pub fn characterise_readout(
    config: &ExperimentConfig,
    setup: &ReadoutSetup,
    index: usize,
) -> Result<ReadoutSummary, CliError> {
    let seq = readout_sequence(config, setup);
    let calibration: SlopeCalibration = slope_calibration(&config.params, &seq).map_err(runtime)?;
    let quiet = FieldTrajectory::quiet();
    let seed = stream_seed(config.seed, SWEEP_STREAM, index as u64);
    let mut runner =
        BlockRunner::new(&config.params, &seq, &quiet, &config.noise, seed).map_err(runtime)?;
    let state = FeedbackState::new(&config.params);
    let period = seq.block_period();
    let mut values = Vec::with_capacity(config.sweep.sensitivity_blocks);
    for k in 0..config.sweep.sensitivity_blocks {
        let record = runner
            .run_block(&state, k as f64 * period)
            .map_err(runtime)?;
        values.push(record.contrast().map_err(runtime)?);
    }
    let report = sensitivity(&values, seq.active_time(), calibration.slope).map_err(runtime)?;
    Ok(ReadoutSummary {
        name: setup.name.clone(),
        calibration,
        sensitivity: report,
    })
}

pub fn run_sweep_mode(
    config: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<Vec<ReadoutSummary>, CliError> {
    let summaries = config
        .sweep
        .readouts
        .par_iter()
        .enumerate()
        .map(|(i, r)| characterise_readout(config, r, i))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(dir) = out {
        ensure_dir(dir)?;
        let mut manifest = RunManifest::new(config);
        for (setup, s) in config.sweep.readouts.iter().zip(&summaries) {
            let file = format!("sweep_{}.csv", s.name);
            let label = io::contrast_label(readout_sequence(config, setup).readout());
            io::write_sweep(&dir.join(&file), &s.calibration.sweep, label)?;
            manifest.outputs.insert(format!("sweep.{}", s.name), file);
        }
        manifest.readouts = summaries.clone();
        manifest.scale_s = summaries.first().map(|s| s.calibration.slope);
        manifest.write(dir)?;
    }
    Ok(summaries)
}

/// Dispatches on the configured mode.
pub fn run(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    info!(
        "mode {:?}, seed {}, output {}",
        config.mode,
        config.seed,
        out.display()
    );
    match config.mode {
        Mode::Experiment => {
            let outcome = run_experiment_mode(config, Some(out))?;
            let reference = outcome.variants.first().map_or("", |v| v.name.as_str());
            for (name, r) in &outcome.reports {
                outln!(
                    "{reference}/{name} sigma ratio at longest tau {:.3}; {name}: optimum tau {:.1} s, white-region slope {:.3}",
                    r.longest_common_ratio(),
                    r.optimum_tau,
                    r.corrected_slope
                );
            }
        }
        Mode::PredictorStudy => {
            let (grid, tests) = run_study_mode(config, Some(out))?;
            outln!("noise \\ degree {:?}", grid.degrees);
            for (a, row) in grid.noise_amplitudes.iter().zip(&grid.mean_error) {
                let cells: Vec<String> = row.iter().map(|e| format!("{e:.4}")).collect();
                outln!("{a:>8} {}", cells.join(" "));
            }
            let improving = tests.iter().filter(|t| t.improves).count();
            outln!(
                "{improving} of {} (noise, degree) cells beat degree 0 at alpha {ALPHA}",
                tests.len()
            );
        }
        Mode::PhaseSweep => {
            for s in run_sweep_mode(config, Some(out))? {
                outln!(
                    "{}: amplitude {:.4}, slope {:.4e} per deg/s, eta {:.4e} deg/s/sqrt(Hz)",
                    s.name,
                    s.calibration.amplitude,
                    s.calibration.slope,
                    s.sensitivity.eta
                );
            }
        }
    }
    outln!("artifacts in {}", out.display());
    Ok(())
}

/// Allan curve of one CSV column.
pub fn allan_from_csv(
    path: &Path,
    column: &str,
    taus: &[f64],
    scale_s: Option<f64>,
    options: AllanOptions,
) -> Result<AllanCurve, CliError> {
    let data = io::read_series_csv(path, column)?;
    if data.is_empty() {
        return Err(CliError::Input(format!(
            "{}: column `{column}` is empty",
            path.display()
        )));
    }
    let taus = if taus.is_empty() {
        let dt = mean_spacing(&data).map_err(|e| CliError::Input(e.to_string()))?;
        log_tau_grid(dt, dt * data.len() as f64, 10)
    } else {
        taus.to_vec()
    };
    let curve =
        allan_deviation_with(&data, &taus, options).map_err(|e| CliError::Input(e.to_string()))?;
    match scale_s {
        Some(s) => rescale_to_rotation(&curve, s).map_err(|e| CliError::Input(e.to_string())),
        None => Ok(curve),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub reference: String,
    pub taus: Vec<f64>,
    /// `(label, sigma per tau)` for every curve, reference first.
    pub curves: Vec<(String, Vec<f64>)>,
    /// Reference σ over each curve's σ.
    pub ratios: Vec<(String, Vec<f64>)>,
    pub stability: Vec<(String, StabilityReport)>,
}

/// Compares every Allan curve of the given run directories against the
/// first one found.
pub fn report(dirs: &[PathBuf]) -> Result<ComparisonReport, CliError> {
    let mut curves = Vec::new();
    for dir in dirs {
        let manifest = RunManifest::read(&dir.join("manifest.json"))?;
        for variant in &manifest.variants {
            if let Some(file) = manifest.outputs.get(&format!("allan.{}", variant.name)) {
                let curve = io::read_allan(&dir.join(file))?;
                curves.push((format!("{}:{}", dir.display(), variant.name), curve));
            }
        }
    }
    let Some((ref_label, reference)) = curves.first().cloned() else {
        return Err(CliError::Input(
            "no Allan curves found in the given runs".into(),
        ));
    };
    let mut stability = Vec::new();
    let mut ratios = Vec::new();
    for (label, curve) in &curves {
        let r = stability_report(curve, &reference)
            .map_err(|e| CliError::Input(format!("{label}: {e}")))?;
        ratios.push((
            label.clone(),
            r.improvement.iter().map(|x| 1.0 / x).collect(),
        ));
        stability.push((
            label.clone(),
            stability_report(&reference, curve).expect("grids already checked"),
        ));
    }
    Ok(ComparisonReport {
        reference: ref_label,
        taus: reference.taus(),
        curves: curves
            .iter()
            .map(|(l, c)| (l.clone(), c.sigmas()))
            .collect(),
        ratios,
        stability,
    })
}

pub fn print_report(report: &ComparisonReport) {
    outln!("reference: {}", report.reference);
    out!("{:>12}", "tau[s]");
    for (label, _) in &report.ratios {
        out!("  {label}");
    }
    outln!("");
    for (i, tau) in report.taus.iter().enumerate() {
        out!("{tau:>12.1}");
        for (_, r) in &report.ratios {
            out!("  {:.4}", r[i]);
        }
        outln!("");
    }
}
