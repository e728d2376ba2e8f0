use std::path::Path;
use std::process::{Command, Output};

use dualspin_cli::config::{load, Source, PRESETS};
use dualspin_cli::io::RunManifest;

fn dualspin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualspin"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn short_fig3(dir: &Path) {
    let out = dualspin(&[
        "run",
        "--preset",
        "fig3",
        "--set",
        "duration=20000",
        "--out",
        &dir.to_string_lossy(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn missing_column_lists_available_ones() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("s.csv");
    std::fs::write(&csv, "t[s],F\n0,1\n1,2\n2,3\n3,4\n").unwrap();
    let out = dualspin(&["allan", &csv.to_string_lossy(), "--column", "G"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("available: t, F"), "{}", stderr(&out));
}

#[test]
fn constant_column_gives_zero_curve() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("s.csv");
    let body: String = (0..100)
        .map(|k| format!("{},0.3\n", k as f64 * 25.0))
        .collect();
    std::fs::write(&csv, format!("t_start[s],G\n{body}")).unwrap();
    let out_csv = dir.path().join("allan.csv");
    let out = dualspin(&[
        "allan",
        &csv.to_string_lossy(),
        "--column",
        "G",
        "--taus",
        "25,50,250",
        "--scale-s",
        "1e-6",
        "--out",
        &out_csv.to_string_lossy(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let curve = dualspin_cli::io::read_allan(&out_csv).unwrap();
    assert_eq!(curve.points.len(), 3);
    assert!(curve.points.iter().all(|p| p.sigma == 0.0));
    let table = dualspin_cli::io::read_table(&out_csv).unwrap();
    let rotation = table.column(&out_csv, "sigma_rotation").unwrap();
    assert!(rotation.iter().all(|&r| r == 0.0));
}

#[test]
fn report_of_a_run_against_itself_gives_unit_ratios() {
    let dir = tempfile::tempdir().unwrap();
    short_fig3(dir.path());
    let report =
        dualspin_cli::runner::report(&[dir.path().to_path_buf(), dir.path().to_path_buf()])
            .unwrap();
    // Reference is the first variant of the first run; its twin in the
    // second run sits at index 3.
    assert_eq!(report.curves.len(), 6);
    assert!(report.ratios[3].1.iter().all(|&r| r == 1.0));
    assert!(report.reference.ends_with(":corrected"));
}

#[test]
fn report_orders_fig3_gains_at_long_tau() {
    let dir = tempfile::tempdir().unwrap();
    short_fig3(dir.path());
    let report = dualspin_cli::runner::report(&[dir.path().to_path_buf()]).unwrap();
    // ratios are σ_corrected / σ_variant
    let last = report.taus.len() - 1;
    let free = report.ratios[1].1[last];
    let anti = report.ratios[2].1[last];
    assert!(free < 1.0 && anti < free, "free {free}, anti {anti}");
}

#[test]
fn mismatched_grids_are_rejected() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    short_fig3(a.path());
    let out = dualspin(&[
        "run",
        "--preset",
        "fig3",
        "--set",
        "duration=30000",
        "--out",
        &b.path().to_string_lossy(),
    ]);
    assert!(out.status.success());
    let out = dualspin(&[
        "report",
        &a.path().to_string_lossy(),
        &b.path().to_string_lossy(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("mismatched"), "{}", stderr(&out));
}

#[test]
fn invalid_config_reports_line_and_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\nduration = 1e4\n\n[sequence]\nn_r = 0\n").unwrap();
    let out = dualspin(&[
        "run",
        "--config",
        &cfg.to_string_lossy(),
        "--out",
        &dir.path().join("o").to_string_lossy(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("bad.toml:5: `sequence.n_r`"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain");
    std::fs::write(&file, "").unwrap();
    let out = dualspin(&[
        "run",
        "--preset",
        "fig4",
        "--out",
        &file.join("sub").to_string_lossy(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn preset_manifests_round_trip() {
    for (name, _) in PRESETS {
        let config = load(&Source::preset(name).unwrap(), &[]).unwrap();
        let manifest = RunManifest::new(&config);
        let json = manifest.to_json();
        let parsed: RunManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed.to_json(), json, "{name}");
        assert_eq!(parsed.config, config, "{name}");
    }
}

#[test]
fn field_dump_is_uniform() {
    let out = dualspin(&[
        "field",
        "--preset",
        "fig3",
        "--set",
        "duration=3000",
        "--dt",
        "750",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t[s],b[G]");
    assert_eq!(lines.len(), 6);
    // 3 G pp sinusoid, zero phase: peak at a quarter period
    let b: f64 = lines[2].split(',').nth(1).unwrap().parse().unwrap();
    assert!((b - 1.5).abs() < 1e-12);
}

#[test]
fn estimate_reproduces_recorded_centres() {
    let dir = tempfile::tempdir().unwrap();
    short_fig3(dir.path());
    let records = dir.path().join("records_free.csv");
    let out = dualspin(&["estimate", &records.to_string_lossy()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let recomputed = String::from_utf8(out.stdout).unwrap();
    let table = dualspin_cli::io::read_table(&records).unwrap();
    let recorded = table.column(&records, "esr_center").unwrap();
    for (line, want) in recomputed.lines().skip(1).zip(recorded) {
        let got: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(got.to_bits(), want.to_bits());
    }
}
