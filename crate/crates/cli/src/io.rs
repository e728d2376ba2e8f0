//! CSV and JSON artifacts. Headers carry units in brackets; numbers use
//! the shortest round-trip representation so reruns are byte-identical.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use dualspin::analysis::AllanCurve;
use dualspin::control::{BlockDecision, ErrorGrid};
use dualspin::estimation::{four_point_estimate, SensitivityReport, SlopeCalibration};
use dualspin::protocol::{contrast_f, AcquisitionRecord};
use dualspin::spinmodel::Readout;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ExperimentConfig;

pub const ARTIFACT_VERSION: &str = concat!("dualspin ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("{path}: no column `{column}`; available: {}", available.join(", "))]
    MissingColumn {
        path: String,
        column: String,
        available: Vec<String>,
    },
    #[error("{path}: no time column (a header ending in `[s]`)")]
    NoTimeColumn { path: String },
    #[error("{path}:{line}: cannot parse `{value}` as a number")]
    BadNumber {
        path: String,
        line: u64,
        value: String,
    },
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// Header name of the contrast column for a readout.
pub fn contrast_label(readout: Readout) -> &'static str {
    match readout {
        Readout::NuclearUnmapped => "G",
        Readout::NuclearMapped | Readout::Electronic => "F",
    }
}

fn writer(path: &Path) -> Result<csv::Writer<File>, IoError> {
    csv::Writer::from_path(path).map_err(|source| IoError::Csv {
        path: path.display().to_string(),
        source,
    })
}

fn write_rows(
    path: &Path,
    header: &[String],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<(), IoError> {
    let wrap = |source| IoError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = writer(path)?;
    w.write_record(header).map_err(wrap)?;
    for row in rows {
        w.write_record(&row).map_err(wrap)?;
    }
    w.flush().map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// One row per block: raw signals, contrast, ESR samples, applied
/// frequencies and the raw four-point estimate.
pub fn write_records(path: &Path, records: &[AcquisitionRecord]) -> Result<(), IoError> {
    let label = records
        .first()
        .map(|r| contrast_label(r.readout))
        .unwrap_or("F");
    let mut header = strings(&["block", "t_start[s]", "s_plus", "s_minus", label]);
    header.extend((1..=4).map(|i| format!("esr_{i}")));
    header.extend((1..=4).map(|i| format!("probe_{i}[Hz]")));
    header.extend(strings(&[
        "mapping[Hz]",
        "nuclear_drive[Hz]",
        "esr_center[Hz]",
        "n_averaged",
    ]));
    let rows = records.iter().enumerate().map(|(k, r)| {
        let estimate = r
            .four_point_reading()
            .ok()
            .and_then(|reading| four_point_estimate(&reading).ok());
        let mut row = vec![
            k.to_string(),
            num(r.t_start),
            num(r.s_plus),
            num(r.s_minus),
            opt(contrast_f(r.s_plus, r.s_minus).ok()),
        ];
        row.extend(r.esr_samples.iter().map(|&x| num(x)));
        row.extend(r.applied.probes.iter().map(|&x| num(x)));
        row.extend([
            num(r.applied.mapping),
            num(r.applied.nuclear_drive),
            opt(estimate),
            r.n_averaged.to_string(),
        ]);
        row
    });
    write_rows(path, &header, rows)
}

/// One row per segment.
pub fn write_segments(path: &Path, records: &[AcquisitionRecord]) -> Result<(), IoError> {
    let label = records
        .first()
        .map(|r| contrast_label(r.readout))
        .unwrap_or("F");
    let header = strings(&["block", "t_mid[s]", "s_plus", "s_minus", label]);
    let rows = records.iter().enumerate().flat_map(|(k, r)| {
        r.segments.iter().map(move |s| {
            vec![
                k.to_string(),
                num(s.t_mid),
                num(s.s_plus),
                num(s.s_minus),
                opt(contrast_f(s.s_plus, s.s_minus).ok()),
            ]
        })
    });
    write_rows(path, &header, rows)
}

pub fn write_allan(path: &Path, curve: &AllanCurve) -> Result<(), IoError> {
    let header = strings(&["tau[s]", "sigma", "error", "n", "sigma_rotation[deg/s]"]);
    let rotation = curve.sigma_rotation();
    let rows = curve.points.iter().enumerate().map(|(i, p)| {
        vec![
            num(p.tau),
            num(p.sigma),
            num(p.error),
            p.n_subdivisions.to_string(),
            opt(rotation.as_ref().map(|r| r[i])),
        ]
    });
    write_rows(path, &header, rows)
}

/// Reads a curve written by [`write_allan`].
pub fn read_allan(path: &Path) -> Result<AllanCurve, IoError> {
    let table = read_table(path)?;
    let col = |name: &str| table.column(path, name);
    let (tau, sigma, error, n) = (col("tau")?, col("sigma")?, col("error")?, col("n")?);
    let rotation = table.column(path, "sigma_rotation").ok();
    let scale = rotation.as_ref().and_then(|r| {
        r.iter()
            .zip(&sigma)
            .find(|(rot, s)| **rot > 0.0 && **s > 0.0)
            .map(|(rot, s)| s / rot)
    });
    Ok(AllanCurve {
        points: (0..tau.len())
            .map(|i| dualspin::analysis::AllanPoint {
                tau: tau[i],
                sigma: sigma[i],
                error: error[i],
                n_subdivisions: n[i] as usize,
            })
            .collect(),
        scale_factor_s: scale,
    })
}

pub fn write_pairs(path: &Path, header: &[&str; 2], rows: &[(f64, f64)]) -> Result<(), IoError> {
    write_rows(
        path,
        &strings(header),
        rows.iter().map(|&(a, b)| vec![num(a), num(b)]),
    )
}

pub fn write_field(path: &Path, samples: &[(f64, f64)]) -> Result<(), IoError> {
    write_pairs(path, &["t[s]", "b[G]"], samples)
}

/// Rows: noise amplitude; columns: polynomial degree.
pub fn write_error_grid(path: &Path, grid: &ErrorGrid) -> Result<(), IoError> {
    let mut header = vec!["noise_amplitude".to_string()];
    header.extend(grid.degrees.iter().map(|d| format!("d{d}")));
    let rows = grid
        .noise_amplitudes
        .iter()
        .zip(&grid.mean_error)
        .map(|(a, row)| {
            let mut r = vec![num(*a)];
            r.extend(row.iter().map(|&e| num(e)));
            r
        });
    write_rows(path, &header, rows)
}

pub fn write_sweep(path: &Path, sweep: &[(f64, f64)], label: &str) -> Result<(), IoError> {
    let header = vec!["theta_offset[rad]".to_string(), label.to_string()];
    write_rows(
        path,
        &header,
        sweep.iter().map(|&(t, c)| vec![num(t), num(c)]),
    )
}

/// Numeric CSV held column-wise; empty cells read as NaN.
#[derive(Debug, Clone)]
pub struct Table {
    pub headers: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

/// Header name with any `[unit]` suffix removed.
pub fn bare_name(header: &str) -> &str {
    header.split('[').next().unwrap_or(header).trim()
}

impl Table {
    /// Column whose bare name (or full header) equals `name`.
    pub fn column(&self, path: &Path, name: &str) -> Result<Vec<f64>, IoError> {
        self.headers
            .iter()
            .position(|h| h == name || bare_name(h) == name)
            .map(|i| self.columns[i].clone())
            .ok_or_else(|| IoError::MissingColumn {
                path: path.display().to_string(),
                column: name.to_string(),
                available: self
                    .headers
                    .iter()
                    .map(|h| bare_name(h).to_string())
                    .collect(),
            })
    }

    /// First column measured in seconds.
    pub fn time_column(&self, path: &Path) -> Result<Vec<f64>, IoError> {
        self.headers
            .iter()
            .position(|h| h.ends_with("[s]"))
            .map(|i| self.columns[i].clone())
            .ok_or_else(|| IoError::NoTimeColumn {
                path: path.display().to_string(),
            })
    }
}

pub fn read_table(path: &Path) -> Result<Table, IoError> {
    let wrap = |source| IoError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(wrap)?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(wrap)?
        .iter()
        .map(String::from)
        .collect();
    let mut columns = vec![Vec::new(); headers.len()];
    for row in reader.records() {
        let row = row.map_err(wrap)?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        for (col, cell) in columns.iter_mut().zip(row.iter()) {
            let value = if cell.is_empty() {
                f64::NAN
            } else {
                cell.parse().map_err(|_| IoError::BadNumber {
                    path: path.display().to_string(),
                    line,
                    value: cell.to_string(),
                })?
            };
            col.push(value);
        }
    }
    Ok(Table { headers, columns })
}

/// `(time, value)` pairs of one column, skipping empty cells.
pub fn read_series_csv(path: &Path, column: &str) -> Result<Vec<(f64, f64)>, IoError> {
    let table = read_table(path)?;
    let values = table.column(path, column)?;
    let times = table.time_column(path)?;
    Ok(times
        .into_iter()
        .zip(values)
        .filter(|(_, v)| v.is_finite())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Aborted { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub name: String,
    pub blocks: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub decisions: Vec<BlockDecision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutSummary {
    pub name: String,
    pub calibration: SlopeCalibration,
    pub sensitivity: SensitivityReport,
}

/// Self-contained record of a run; its `config` reproduces it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub status: RunStatus,
    pub config: ExperimentConfig,
    #[serde(default)]
    pub variants: Vec<VariantSummary>,
    #[serde(default)]
    pub readouts: Vec<ReadoutSummary>,
    /// Contrast per deg/s used for the rotation axis.
    #[serde(default)]
    pub scale_s: Option<f64>,
    /// Artifact role → file name relative to the run directory.
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            version: ARTIFACT_VERSION.to_string(),
            seed: config.seed,
            status: RunStatus::Complete,
            config: config.clone(),
            variants: Vec::new(),
            readouts: Vec::new(),
            scale_s: None,
            outputs: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, IoError> {
        let path = dir.join("manifest.json");
        std::fs::write(&path, self.to_json() + "\n").map_err(|source| IoError::File {
            path: path.display().to_string(),
            source,
        })?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        let text = std::fs::read_to_string(path).map_err(|source| IoError::File {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| IoError::Json {
            path: path.display().to_string(),
            source,
        })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}
