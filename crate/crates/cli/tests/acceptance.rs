//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit status
//! if any criterion fails.

use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use dualspin::analysis::{allan_deviation_uniform, AllanCurve, AllanOptions, FeatureKind};
use dualspin::estimation::{
    four_point_estimate, sensitivity, FourPointEstimator, FourPointReading,
    DEFAULT_PARALLEL_TOLERANCE,
};
use dualspin::protocol::contrast_f;
use dualspin::spinmodel::{
    esr_spectrum, mapping_fidelity, ramsey_bias_slope, ramsey_fringe, ramsey_signal, Readout,
    SensorParams,
};
use dualspin_cli::config::{load, ExperimentConfig, Source};
use dualspin_cli::runner;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[path = "../../core/tests/support/mod.rs"]
mod support;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn preset(name: &str, overrides: &[&str]) -> ExperimentConfig {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    load(&Source::preset(name).expect("preset exists"), &overrides).expect("preset loads")
}

fn within_time(elapsed: Duration, limit: f64) -> Result<(), String> {
    if elapsed.as_secs_f64() < limit {
        Ok(())
    } else {
        Err(format!(
            "took {:.1} s, limit {limit} s",
            elapsed.as_secs_f64()
        ))
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let dt = 1.0;
    let sigma0 = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let normal = Normal::new(0.0, sigma0).unwrap();
    let values: Vec<f64> = (0..100_000).map(|_| normal.sample(&mut rng)).collect();
    let taus = [4.0 * dt, 16.0 * dt, 64.0 * dt];
    let curve = allan_deviation_uniform(&values, dt, &taus, AllanOptions::default())
        .map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for p in &curve.points {
        let expected = sigma0 * (dt / p.tau).sqrt();
        let dev = (p.sigma / expected - 1.0).abs();
        worst = worst.max(dev);
        if dev >= 0.05 {
            return Err(format!("tau {}: sigma {} vs {expected}", p.tau, p.sigma));
        }
    }
    if curve.points.len() != 3 {
        return Err(format!("{} of 3 points emitted", curve.points.len()));
    }
    within_time(start.elapsed(), 5.0)?;
    Ok(format!("worst deviation {:.2}%", 100.0 * worst))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let offsets = [-700e3, -350e3, 350e3, 700e3];
    let reading = |shift: f64, p: &SensorParams| {
        let f = offsets.map(|o| p.nu_e + o);
        FourPointReading::new(f, f.map(|x| esr_spectrum(x, shift, p))).unwrap()
    };
    let symmetric = SensorParams {
        nuclear_polarization: 1.0,
        ..SensorParams::default()
    };
    let zero =
        four_point_estimate(&reading(0.0, &symmetric)).map_err(|e| e.to_string())? - symmetric.nu_e;
    if zero.abs() > 4.0 * f64::EPSILON * symmetric.nu_e {
        return Err(format!("bias at zero shift {zero} Hz"));
    }
    let params = SensorParams::default();
    let mut worst: f64 = 0.0;
    for (shift, oracle) in support::BIAS_FIXTURE {
        let bias = four_point_estimate(&reading(shift, &params)).map_err(|e| e.to_string())?
            - params.nu_e
            - shift;
        let rel = (bias - oracle).abs() / oracle.abs().max(1.0);
        worst = worst.max(rel);
        if (bias - oracle).abs() > 0.01 * oracle.abs() + 1e-3 {
            return Err(format!("shift {shift}: bias {bias} vs oracle {oracle}"));
        }
    }
    let est = FourPointEstimator::new(&offsets, &params, DEFAULT_PARALLEL_TOLERANCE);
    for k in 0..50 {
        let shift = 550e3 + 50e3 * k as f64;
        for s in [shift, -shift] {
            if est.estimate(&reading(s, &params)).is_ok() {
                return Err(format!("shift {s} Hz accepted outside the capture range"));
            }
        }
    }
    within_time(start.elapsed(), 1.0)?;
    Ok(format!(
        "zero-shift bias {zero:.1e} Hz, fixture max rel. dev {worst:.1e}, rejection for 0.55-3 MHz"
    ))
}

fn feature_near(curve: &dualspin_cli::runner::VariantOutcome, t: f64) -> bool {
    curve.features.iter().any(|f| {
        f.tau >= t / 2.0
            && f.tau <= 2.0 * t
            && (f.kind == FeatureKind::SlopeReversal || f.significance >= 2.0)
    })
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let config = preset("fig2", &[]);
    let outcome = runner::run_experiment_mode(&config, None).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let uncorrected = &outcome.variants[0];
    let blocks = uncorrected.run.records.len();
    let mut problems = Vec::new();
    for t in [50.0, 1000.0] {
        if !feature_near(uncorrected, t) {
            problems.push(format!("no feature near {t} s"));
        }
    }
    let (_, report) = &outcome.reports[0];
    let ratio = report.longest_common_ratio();
    if ratio.is_nan() || ratio < 3.0 {
        problems.push(format!("improvement {ratio:.2} < 3"));
    }
    if report.corrected_slope.is_nan() || (report.corrected_slope + 0.5).abs() > 0.1 {
        problems.push(format!("corrected slope {:.3}", report.corrected_slope));
    }
    if let Err(e) = within_time(elapsed, 60.0) {
        problems.push(e);
    }
    let summary = format!(
        "{blocks} blocks, improvement {ratio:.2} at tau {:.0} s, corrected slope {:.3}, {:.1} s",
        report.taus.last().unwrap(),
        report.corrected_slope,
        elapsed.as_secs_f64()
    );
    if problems.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", problems.join(", ")))
    }
}

fn ordered_in_band(curves: &[&AllanCurve], lo: f64, hi: f64) -> (bool, usize) {
    let [plus, zero, minus] = curves else {
        return (false, 0);
    };
    let mut checked = 0;
    for ((p, z), m) in plus.points.iter().zip(&zero.points).zip(&minus.points) {
        if p.tau < lo || p.tau > hi {
            continue;
        }
        checked += 1;
        if !(p.sigma < z.sigma && z.sigma < m.sigma) {
            return (false, checked);
        }
    }
    (checked > 0, checked)
}

fn criterion_4() -> Outcome {
    let period = 3000.0;
    let mut passes = 0;
    let mut detail = Vec::new();
    for seed in 0..5u64 {
        let mut config = preset("fig3", &[]);
        config.seed = seed;
        let outcome = runner::run_experiment_mode(&config, None).map_err(|e| e.to_string())?;
        let by_gain = |g: f64| {
            let i = config
                .variants
                .iter()
                .position(|v| v.gain == g)
                .expect("gain variant");
            &outcome.variants[i].curve
        };
        let (ok, n) = ordered_in_band(
            &[by_gain(1.0), by_gain(0.0), by_gain(-1.0)],
            period / 2.0,
            period * 2.0,
        );
        if ok {
            passes += 1;
        }
        detail.push(format!(
            "seed {seed}: {} ({n} taus)",
            if ok { "ordered" } else { "not ordered" }
        ));
    }
    let summary = format!("{passes}/5 seeds ordered; {}", detail.join(", "));
    if passes >= 4 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let config = preset("fig4", &[]);
    let (grid, tests) = runner::run_study_mode(&config, None).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let amp = config.study.perturbation_amplitude;
    let row = |noise: f64| {
        grid.row(noise)
            .map(|r| &grid.mean_error[r])
            .ok_or_else(|| format!("noise {noise} missing from grid"))
    };
    let col = |d: usize| {
        grid.col(d)
            .ok_or_else(|| format!("degree {d} missing from grid"))
    };

    let quiet = row(0.0)?;
    let a = quiet.windows(2).all(|w| w[1] < w[0]);
    let equal = row(amp)?;
    let d1 = equal[col(1)?];
    let b = grid
        .degrees
        .iter()
        .filter(|&&d| d >= 3)
        .all(|&d| d1 < equal[grid.col(d).unwrap()]);
    let noisy = amp / 0.1;
    let c = tests
        .iter()
        .filter(|t| t.noise_amplitude == noisy)
        .all(|t| !t.improves);
    let min_p = tests
        .iter()
        .filter(|t| t.noise_amplitude == noisy)
        .map(|t| t.p)
        .fold(1.0f64, f64::min);
    let timing = within_time(elapsed, 30.0);
    let summary = format!(
        "(a) {} (b) {} (c) {} [min p at ratio 0.1: {min_p:.3}], {} realizations, {:.2} s",
        a,
        b,
        c,
        config.study.realizations,
        elapsed.as_secs_f64()
    );
    if a && b && c && timing.is_ok() && config.study.realizations == 20 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn criterion_6() -> Outcome {
    let sigma = 0.01;
    let slope = 2.5e-6;
    let sample_time = 4.0;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let normal = Normal::new(0.0, sigma).unwrap();
    let series: Vec<f64> = (0..100_000).map(|_| normal.sample(&mut rng)).collect();
    let synthetic = sensitivity(&series, sample_time, slope).map_err(|e| e.to_string())?;
    let closed = sigma * sample_time.sqrt() / slope;
    let synthetic_ok = (synthetic.eta / closed - 1.0).abs() < 0.02;

    let config = preset("fig1e", &[]);
    let readouts = runner::run_sweep_mode(&config, None).map_err(|e| e.to_string())?;
    let eta = |name: &str| {
        readouts
            .iter()
            .find(|r| r.name == name)
            .map(|r| r.sensitivity.eta)
            .ok_or_else(|| format!("readout `{name}` missing from fig1e"))
    };
    let nuclear = eta("mapped")?;
    let electronic = eta("electronic")?;
    let nuclear_ok = (1500.0..=6000.0).contains(&nuclear);
    let electronic_ok = electronic >= 100.0 * nuclear;
    let summary = format!(
        "synthetic eta/closed {:.4}; nuclear eta {nuclear:.0}; electronic eta {electronic:.3e} ({:.0}x)",
        synthetic.eta / closed,
        electronic / nuclear
    );
    if synthetic_ok && nuclear_ok && electronic_ok {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10_000 {
        let (a, b): (f64, f64) = (rng.random_range(0.01..1.0), rng.random_range(0.01..1.0));
        let k = 2f64.powi(rng.random_range(-30..30));
        if contrast_f(k * a, k * b).unwrap() != contrast_f(a, b).unwrap() {
            return Err(format!("common-mode gain {k} changes F at ({a}, {b})"));
        }
        let theta = rng.random_range(-10.0..10.0);
        let phase = rng.random_range(-10.0..10.0);
        let t = rng.random_range(0.0..2e-3);
        let s = ramsey_fringe(theta, t, phase, 0.858, 840e-6);
        if s != ramsey_fringe(-theta, t, -phase, 0.858, 840e-6) {
            return Err(format!(
                "mirror symmetry fails at theta {theta}, phase {phase}"
            ));
        }
        if (s - ramsey_fringe(theta + 2.0 * PI, t, phase, 0.858, 840e-6)).abs() > 1e-12 {
            return Err(format!("2pi periodicity fails at theta {theta}"));
        }
    }
    let params = SensorParams::lab_calibrated();
    let mut worst_fd: f64 = 0.0;
    for (readout, t) in [
        (Readout::NuclearMapped, 600e-6),
        (Readout::NuclearUnmapped, 200e-6),
        (Readout::Electronic, 403e-9),
    ] {
        let h = 1e-5;
        let fd = (ramsey_signal(PI / 2.0, t, h, readout, &params)
            - ramsey_signal(PI / 2.0, t, -h, readout, &params))
            / (2.0 * h);
        let analytic = ramsey_bias_slope(t, readout, &params);
        worst_fd = worst_fd.max(((fd - analytic) / analytic).abs());
    }
    if worst_fd >= 1e-6 {
        return Err(format!("slope vs finite difference {worst_fd:.2e}"));
    }
    let mut worst_map: f64 = 0.0;
    for k in 0..20 {
        let d = -2.0e6 + 4.0e6 * k as f64 / 19.0;
        worst_map = worst_map.max(
            (support::rk4_transfer(params.mapping_rabi, d, 4000) - mapping_fidelity(d, &params))
                .abs(),
        );
    }
    if worst_map >= 1e-6 {
        return Err(format!(
            "mapping fidelity vs two-level oracle {worst_map:.2e}"
        ));
    }
    Ok(format!(
        "gain invariance and mirror symmetry exact, periodicity to 1e-12, slope dev {worst_fd:.1e}, mapping dev {worst_map:.1e}"
    ))
}

fn run_binary(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dualspin"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "dualspin {args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn records(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .is_some_and(|n| n.to_string_lossy().starts_with("records_"))
        })
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).map_err(|e| e.to_string())?;
            Ok((p.file_name().unwrap().to_string_lossy().into_owned(), bytes))
        })
        .collect()
}

fn criterion_8() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = |n: &str| tmp.path().join(n);
    let path = |n: &str| dir(n).to_string_lossy().into_owned();
    let base = [
        "run",
        "--preset",
        "fig2",
        "--set",
        "duration=20000",
        "--seed",
        "11",
    ];
    run_binary(&[&base[..], &["--out", &path("a")]].concat())?;
    run_binary(&[&base[..], &["--out", &path("b")]].concat())?;
    let manifest = dir("a").join("manifest.json");
    run_binary(&[
        "run",
        "--config",
        &manifest.to_string_lossy(),
        "--out",
        &path("c"),
    ])?;
    let a = records(&dir("a"))?;
    if a.is_empty() {
        return Err("no record CSVs written".into());
    }
    for other in ["b", "c"] {
        if records(&dir(other))? != a {
            return Err(format!("run `{other}` differs from the first run"));
        }
    }
    Ok(format!(
        "{} record files byte-identical across 3 processes (rerun, manifest replay)",
        a.len()
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("white-noise Allan law", criterion_1),
        ("four-point estimator", criterion_2),
        ("0.14 G scenario", criterion_3),
        ("3 G gain ordering", criterion_4),
        ("predictor study", criterion_5),
        ("sensitivity pipeline", criterion_6),
        ("signal-model properties", criterion_7),
        ("determinism", criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(msg) => println!("criterion {}: PASS {name} ({secs:.1} s): {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {}: FAIL {name} ({secs:.1} s): {msg}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
