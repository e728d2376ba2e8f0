//! Run configuration: TOML files, built-in presets, dotted-path overrides
//! and validation with key paths.

use std::path::Path;

use dualspin::analysis::AllanConvention;
use dualspin::control::StudyConfig;
use dualspin::environment::{FieldSpec, NoiseModel};
use dualspin::protocol::{ProtocolError, SequenceConfig};
use dualspin::spinmodel::{SensorParams, Spin};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::RunManifest;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("{origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("override `{expr}`: {reason}")]
    Override { expr: String, reason: String },
    #[error("{origin}{line}: `{key}` {reason}", line = line.map(|l| format!(":{l}")).unwrap_or_default())]
    Invalid {
        origin: String,
        key: String,
        line: Option<usize>,
        reason: String,
    },
    #[error("unknown preset `{0}` (available: fig1e, fig2, fig3, fig4)")]
    UnknownPreset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Experiment,
    PredictorStudy,
    PhaseSweep,
}

/// Which contrast series feeds the Allan analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesKind {
    #[default]
    Blocks,
    Segments,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Explicit averaging times, seconds; empty selects a log grid.
    pub taus: Vec<f64>,
    pub per_decade: usize,
    pub series: SeriesKind,
    pub overlapping: bool,
    pub convention: AllanConvention,
    /// Contrast per deg/s for the rotation axis; 0 calibrates from a phase sweep.
    pub scale_s: f64,
    /// Leading points used for the white-law fit in feature detection.
    pub white_points: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            taus: Vec::new(),
            per_decade: 10,
            series: SeriesKind::Blocks,
            overlapping: false,
            convention: AllanConvention::BinAverage,
            scale_s: 0.0,
            white_points: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    #[default]
    None,
    Feedback,
}

/// One acquisition sharing the field realization of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantConfig {
    pub name: String,
    pub controller: ControllerKind,
    pub gain: f64,
    pub predictor_degree: usize,
    pub history_capacity: usize,
    pub tolerance: f64,
}

impl Default for VariantConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            controller: ControllerKind::None,
            gain: 1.0,
            predictor_degree: 0,
            history_capacity: dualspin::control::DEFAULT_HISTORY_CAPACITY,
            tolerance: dualspin::estimation::DEFAULT_PARALLEL_TOLERANCE,
        }
    }
}

/// A readout configuration characterised by a phase sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutSetup {
    pub name: String,
    pub spin: Spin,
    #[serde(default = "yes")]
    pub use_mapping: bool,
    /// Defaults to the sequence setting (nuclear) or T₂e* (electronic).
    #[serde(default)]
    pub t_ramsey: Option<f64>,
    #[serde(default)]
    pub sequence_length: Option<f64>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub points: usize,
    /// Blocks simulated per readout for the sensitivity estimate.
    pub sensitivity_blocks: usize,
    pub readouts: Vec<ReadoutSetup>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            points: 72,
            sensitivity_blocks: 200,
            readouts: vec![ReadoutSetup {
                name: "mapped".into(),
                spin: Spin::Nuclear,
                use_mapping: true,
                t_ramsey: None,
                sequence_length: None,
            }],
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Simulated acquisition time, seconds.
    pub duration: f64,
    pub params: SensorParams,
    pub sequence: SequenceConfig,
    pub noise: NoiseModel,
    pub field: FieldSpec,
    pub analysis: AnalysisConfig,
    pub variants: Vec<VariantConfig>,
    pub study: StudyConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Experiment,
            seed: 0,
            duration: 1e4,
            params: SensorParams::default(),
            sequence: SequenceConfig::default(),
            noise: NoiseModel::default(),
            field: FieldSpec::default(),
            analysis: AnalysisConfig::default(),
            variants: vec![VariantConfig::default()],
            study: StudyConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

pub const PRESETS: [(&str, &str); 4] = [
    ("fig1e", include_str!("../presets/fig1e.toml")),
    ("fig2", include_str!("../presets/fig2.toml")),
    ("fig3", include_str!("../presets/fig3.toml")),
    ("fig4", include_str!("../presets/fig4.toml")),
];

pub fn preset_source(name: &str) -> Result<&'static str, ConfigError> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, s)| *s)
        .ok_or_else(|| ConfigError::UnknownPreset(name.to_string()))
}

/// Where a configuration came from, kept for diagnostics.
#[derive(Debug, Clone)]
pub struct Source {
    pub origin: String,
    pub text: String,
    pub json: bool,
}

impl Source {
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        Ok(Self {
            origin: format!("preset {name}"),
            text: preset_source(name)?.to_string(),
            json: false,
        })
    }

    pub fn file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self {
            origin: path.display().to_string(),
            text,
            json: path.extension().is_some_and(|e| e == "json"),
        })
    }

    pub fn toml(origin: &str, text: &str) -> Self {
        Self {
            origin: origin.to_string(),
            text: text.to_string(),
            json: false,
        }
    }
}

/// Parses, applies `key=value` overrides and validates.
pub fn load(source: &Source, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let parse_err = |message: String| ConfigError::Parse {
        origin: source.origin.clone(),
        message,
    };
    let config = if source.json {
        let manifest: RunManifest =
            serde_json::from_str(&source.text).map_err(|e| parse_err(e.to_string()))?;
        if overrides.is_empty() {
            manifest.config
        } else {
            let mut table = match toml::Value::try_from(&manifest.config) {
                Ok(toml::Value::Table(t)) => t,
                Ok(_) => unreachable!("config serializes to a table"),
                Err(e) => return Err(parse_err(e.to_string())),
            };
            apply_overrides(&mut table, overrides)?;
            deserialize_table(table).map_err(parse_err)?
        }
    } else if overrides.is_empty() {
        toml::from_str(&source.text).map_err(|e| parse_err(e.to_string()))?
    } else {
        let mut table: toml::Table =
            toml::from_str(&source.text).map_err(|e| parse_err(e.to_string()))?;
        apply_overrides(&mut table, overrides)?;
        deserialize_table(table).map_err(parse_err)?
    };
    validate(&config).map_err(|(key, reason)| ConfigError::Invalid {
        origin: source.origin.clone(),
        line: locate_key(&source.text, &key),
        key,
        reason,
    })?;
    Ok(config)
}

fn deserialize_table(table: toml::Table) -> Result<ExperimentConfig, String> {
    ExperimentConfig::deserialize(toml::Value::Table(table)).map_err(|e| e.to_string())
}

/// Sets `a.b.c = value` in `table`. The value is read as a TOML literal and
/// falls back to a bare string.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<(), ConfigError> {
    for expr in overrides {
        let fail = |reason: &str| ConfigError::Override {
            expr: expr.clone(),
            reason: reason.to_string(),
        };
        let (key, raw) = expr
            .split_once('=')
            .ok_or_else(|| fail("expected key=value"))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(fail("empty key segment"));
        }
        let value = parse_literal(raw.trim());
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("non-empty key");
        let mut node = &mut *table;
        for part in parts {
            let entry = node
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = match entry {
                toml::Value::Table(t) => t,
                _ => return Err(fail(&format!("`{part}` is not a table"))),
            };
        }
        node.insert(last.to_string(), value);
    }
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Best-effort 1-based line of a dotted key in TOML text.
pub fn locate_key(text: &str, key: &str) -> Option<usize> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop()?;
    let section = parts.join(".");
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if let Some(header) = trimmed.strip_prefix('[') {
            current = header
                .trim_matches(|c| c == '[' || c == ']')
                .trim()
                .to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = trimmed.split_once('=') {
                if k.trim() == leaf {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

fn positive(key: &str, v: f64) -> Result<(), (String, String)> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err((
            key.to_string(),
            format!("must be strictly positive, got {v}"),
        ))
    }
}

/// Semantic checks; errors carry the dotted key.
pub fn validate(config: &ExperimentConfig) -> Result<(), (String, String)> {
    use dualspin::spinmodel::ParamError;
    config.params.validate().map_err(|e| {
        let name = match &e {
            ParamError::NotPositive { name, .. } | ParamError::OutOfRange { name, .. } => *name,
        };
        (format!("params.{name}"), e.to_string())
    })?;
    config.sequence.validate().map_err(|e| match e {
        ProtocolError::Config { name, reason } => (format!("sequence.{name}"), reason),
        other => ("sequence".into(), other.to_string()),
    })?;
    config
        .noise
        .validate()
        .map_err(|e| ("noise".to_string(), e.to_string()))?;
    dualspin::environment::FieldTrajectory::new(config.field.clone())
        .map_err(|e| ("field".to_string(), e.to_string()))?;
    positive("duration", config.duration)?;
    if config.analysis.taus.iter().any(|t| !(*t > 0.0)) {
        return Err(("analysis.taus".into(), "must all be positive".into()));
    }
    if config.analysis.per_decade == 0 {
        return Err(("analysis.per_decade".into(), "must be at least 1".into()));
    }
    if config.analysis.scale_s < 0.0 || !config.analysis.scale_s.is_finite() {
        return Err((
            "analysis.scale_s".into(),
            "must be ≥ 0 (0 calibrates)".into(),
        ));
    }
    match config.mode {
        Mode::Experiment => {
            if config.variants.is_empty() {
                return Err(("variants".into(), "needs at least one variant".into()));
            }
            let mut names: Vec<&str> = config.variants.iter().map(|v| v.name.as_str()).collect();
            names.sort_unstable();
            if names.windows(2).any(|w| w[0] == w[1]) {
                return Err(("variants.name".into(), "must be unique".into()));
            }
            for v in &config.variants {
                if v.name.is_empty()
                    || !v
                        .name
                        .chars()
                        .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
                {
                    return Err((
                        "variants.name".into(),
                        format!("`{}` must be non-empty [A-Za-z0-9_-]", v.name),
                    ));
                }
                if !v.gain.is_finite() {
                    return Err(("variants.gain".into(), "must be finite".into()));
                }
                if !(v.tolerance >= 0.0) {
                    return Err(("variants.tolerance".into(), "must be ≥ 0".into()));
                }
            }
        }
        Mode::PredictorStudy => {
            let s = &config.study;
            if s.realizations == 0 {
                return Err(("study.realizations".into(), "must be at least 1".into()));
            }
            positive("study.samples_per_period", s.samples_per_period)?;
            if s.degrees.is_empty() || s.noise_amplitudes.is_empty() {
                return Err(("study.degrees".into(), "grid axes must be non-empty".into()));
            }
            if s.noise_amplitudes.iter().any(|a| !(*a >= 0.0)) {
                return Err(("study.noise_amplitudes".into(), "must be ≥ 0".into()));
            }
        }
        Mode::PhaseSweep => {
            if config.sweep.points < 8 {
                return Err(("sweep.points".into(), "needs at least 8 points".into()));
            }
            if config.sweep.readouts.is_empty() {
                return Err(("sweep.readouts".into(), "needs at least one readout".into()));
            }
            if config.sweep.sensitivity_blocks < 2 {
                return Err(("sweep.sensitivity_blocks".into(), "needs at least 2".into()));
            }
            for r in &config.sweep.readouts {
                if let Some(t) = r.t_ramsey {
                    positive("sweep.readouts.t_ramsey", t)?;
                }
                if let Some(t) = r.sequence_length {
                    positive("sweep.readouts.sequence_length", t)?;
                }
            }
        }
    }
    Ok(())
}
