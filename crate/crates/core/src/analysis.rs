//! Allan deviation, rotation rescaling and stability comparisons.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

/// Minimum number of bins for an Allan point.
pub const MIN_SUBDIVISIONS: usize = 3;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("series is empty")]
    EmptySeries,
    #[error("series needs strictly increasing times with positive spacing")]
    BadTimeBase,
    #[error("averaging time {tau} s is not usable: {reason}")]
    BadTau { tau: f64, reason: String },
    #[error("curves have mismatched tau grids ({left} vs {right} points or differing values)")]
    MismatchedGrids { left: usize, right: usize },
    #[error("scale factor must be positive, got {0}")]
    BadScale(f64),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
}

/// How the bin difference is normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllanConvention {
    /// Differences of bin-averaged values; σ in signal units.
    #[default]
    BinAverage,
    /// Bin differences divided by τ; σ in signal units per second.
    PerTau,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllanOptions {
    pub overlapping: bool,
    pub convention: AllanConvention,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllanPoint {
    pub tau: f64,
    pub sigma: f64,
    pub error: f64,
    pub n_subdivisions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllanCurve {
    pub points: Vec<AllanPoint>,
    /// Contrast per deg/s; set by [`rescale_to_rotation`].
    pub scale_factor_s: Option<f64>,
}

impl AllanCurve {
    pub fn taus(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.tau).collect()
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.sigma).collect()
    }

    /// σ expressed as a rotation rate, if a scale factor is attached.
    pub fn sigma_rotation(&self) -> Option<Vec<f64>> {
        self.scale_factor_s
            .map(|s| self.points.iter().map(|p| p.sigma / s).collect())
    }

    /// Point whose τ is closest to `tau` on a log axis.
    pub fn nearest(&self, tau: f64) -> Option<&AllanPoint> {
        self.points.iter().min_by(|a, b| {
            let da = (a.tau / tau).ln().abs();
            let db = (b.tau / tau).ln().abs();
            da.total_cmp(&db)
        })
    }
}

/// Mean sampling interval of a `(time, value)` series.
pub fn mean_spacing(series: &[(f64, f64)]) -> Result<f64, AnalysisError> {
    if series.is_empty() {
        return Err(AnalysisError::EmptySeries);
    }
    if series.len() < 2 || series.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(AnalysisError::BadTimeBase);
    }
    Ok((series[series.len() - 1].0 - series[0].0) / (series.len() - 1) as f64)
}

/// Allan deviation of a time-stamped series with default options.
///
/// The sample index is the time base; τ labels use the mean spacing, so
/// dead-time gaps between blocks do not distort the binning.
pub fn allan_deviation(series: &[(f64, f64)], taus: &[f64]) -> Result<AllanCurve, AnalysisError> {
    allan_deviation_with(series, taus, AllanOptions::default())
}

pub fn allan_deviation_with(
    series: &[(f64, f64)],
    taus: &[f64],
    options: AllanOptions,
) -> Result<AllanCurve, AnalysisError> {
    let dt = mean_spacing(series)?;
    let values: Vec<f64> = series.iter().map(|&(_, v)| v).collect();
    allan_deviation_uniform(&values, dt, taus, options)
}

/// Allan deviation of uniformly sampled `values` with spacing `dt`.
///
/// Each τ is snapped to the nearest multiple of `dt`. Points with fewer
/// than three bins are dropped with a warning.
pub fn allan_deviation_uniform(
    values: &[f64],
    dt: f64,
    taus: &[f64],
    options: AllanOptions,
) -> Result<AllanCurve, AnalysisError> {
    if values.is_empty() {
        return Err(AnalysisError::EmptySeries);
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(AnalysisError::BadTimeBase);
    }
    // Referencing to the first sample keeps the prefix sums small, and a
    // constant series then gives exactly zero.
    let origin = values[0];
    let mut prefix = Vec::with_capacity(values.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for v in values {
        acc += v - origin;
        prefix.push(acc);
    }

    let mut ms = Vec::with_capacity(taus.len());
    for &tau in taus {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(AnalysisError::BadTau {
                tau,
                reason: "must be positive".into(),
            });
        }
        let m = (tau / dt).round() as usize;
        if m == 0 {
            return Err(AnalysisError::BadTau {
                tau,
                reason: format!("shorter than the sampling interval {dt} s"),
            });
        }
        if (m as f64 * dt - tau).abs() > 1e-6 * tau.max(dt) {
            warn!("tau {tau} s snapped to {} s", m as f64 * dt);
        }
        if values.len() / m < MIN_SUBDIVISIONS {
            warn!(
                "tau {tau} s leaves only {} subdivisions; point omitted",
                values.len() / m
            );
            continue;
        }
        ms.push(m);
    }

    let points = ms
        .par_iter()
        .map(|&m| allan_point(&prefix, m, dt, options))
        .collect();
    Ok(AllanCurve {
        points,
        scale_factor_s: None,
    })
}

fn allan_point(prefix: &[f64], m: usize, dt: f64, options: AllanOptions) -> AllanPoint {
    let n = prefix.len() - 1;
    let bins = n / m;
    let mean = |start: usize| (prefix[start + m] - prefix[start]) / m as f64;
    let (sum_sq, count) = if options.overlapping {
        let count = n - 2 * m + 1;
        let s: f64 = (0..count).map(|i| (mean(i + m) - mean(i)).powi(2)).sum();
        (s, count)
    } else {
        let s: f64 = (0..bins - 1)
            .map(|k| (mean((k + 1) * m) - mean(k * m)).powi(2))
            .sum();
        (s, bins - 1)
    };
    let tau = m as f64 * dt;
    let mut sigma = (0.5 * sum_sq / count as f64).sqrt();
    if options.convention == AllanConvention::PerTau {
        sigma /= tau;
    }
    AllanPoint {
        tau,
        sigma,
        error: sigma / ((bins - 1) as f64).sqrt(),
        n_subdivisions: bins,
    }
}

/// Log-spaced τ grid, `per_decade` points per decade, snapped to distinct
/// multiples of `dt` and capped at a third of `duration`.
pub fn log_tau_grid(dt: f64, duration: f64, per_decade: usize) -> Vec<f64> {
    let max_m = (duration / dt / MIN_SUBDIVISIONS as f64).floor() as usize;
    if max_m == 0 || per_decade == 0 {
        return Vec::new();
    }
    let step = 10f64.powf(1.0 / per_decade as f64);
    let mut out = Vec::new();
    let mut last = 0usize;
    let mut x = 1.0f64;
    while x <= max_m as f64 * (1.0 + 1e-12) {
        let m = x.round() as usize;
        if m > last && m <= max_m {
            out.push(m as f64 * dt);
            last = m;
        }
        x *= step;
    }
    out
}

/// Attaches the contrast-per-(deg/s) factor so σ/s reads in deg/s.
pub fn rescale_to_rotation(curve: &AllanCurve, s: f64) -> Result<AllanCurve, AnalysisError> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(AnalysisError::BadScale(s));
    }
    Ok(AllanCurve {
        points: curve.points.clone(),
        scale_factor_s: Some(s),
    })
}

/// Least-squares slope of log σ against log τ over points with
/// `tau_min ≤ τ ≤ tau_max`.
pub fn loglog_slope(curve: &AllanCurve, tau_min: f64, tau_max: f64) -> Result<f64, AnalysisError> {
    let pts: Vec<(f64, f64)> = curve
        .points
        .iter()
        .filter(|p| p.tau >= tau_min && p.tau <= tau_max && p.sigma > 0.0)
        .map(|p| (p.tau.ln(), p.sigma.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(AnalysisError::TooFewPoints {
            needed: 2,
            got: pts.len(),
        });
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// σ exceeds the fitted white law by at least twice its error bar.
    Excess,
    /// Local log-log slope turns from falling to rising.
    SlopeReversal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub tau: f64,
    pub kind: FeatureKind,
    /// Excess over the white law in units of the error bar.
    pub significance: f64,
}

/// Flags departures from a `τ^{-1/2}` law fitted to the first
/// `white_points` points.
pub fn detect_features(
    curve: &AllanCurve,
    white_points: usize,
) -> Result<Vec<Feature>, AnalysisError> {
    let pts = &curve.points;
    let fit: Vec<&AllanPoint> = pts
        .iter()
        .take(white_points)
        .filter(|p| p.sigma > 0.0)
        .collect();
    if fit.is_empty() {
        return Err(AnalysisError::TooFewPoints { needed: 1, got: 0 });
    }
    let log_a = fit
        .iter()
        .map(|p| p.sigma.ln() + 0.5 * p.tau.ln())
        .sum::<f64>()
        / fit.len() as f64;
    let white = |tau: f64| (log_a - 0.5 * tau.ln()).exp();

    let mut out = Vec::new();
    for (i, p) in pts.iter().enumerate() {
        let significance = if p.error > 0.0 {
            (p.sigma - white(p.tau)) / p.error
        } else {
            0.0
        };
        if i >= white_points && significance >= 2.0 {
            out.push(Feature {
                tau: p.tau,
                kind: FeatureKind::Excess,
                significance,
            });
        }
        if i >= 1 && i + 1 < pts.len() {
            let before = (p.sigma / pts[i - 1].sigma).ln();
            let after = (pts[i + 1].sigma / p.sigma).ln();
            if before < 0.0 && after > 0.0 {
                out.push(Feature {
                    tau: p.tau,
                    kind: FeatureKind::SlopeReversal,
                    significance,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub taus: Vec<f64>,
    /// Uncorrected σ over corrected σ at each τ.
    pub improvement: Vec<f64>,
    pub optimum_tau: f64,
    pub optimum_sigma: f64,
    /// Corrected log-log slope up to the optimum τ.
    pub corrected_slope: f64,
    /// Whether that slope departs from −½ by more than 0.1.
    pub deviates_from_white: bool,
}

impl StabilityReport {
    pub fn longest_common_ratio(&self) -> f64 {
        *self.improvement.last().expect("report has points")
    }
}

fn same_grid(a: &AllanCurve, b: &AllanCurve) -> Result<(), AnalysisError> {
    let mismatch = AnalysisError::MismatchedGrids {
        left: a.points.len(),
        right: b.points.len(),
    };
    if a.points.len() != b.points.len() || a.points.is_empty() {
        return Err(mismatch);
    }
    if a.points
        .iter()
        .zip(&b.points)
        .any(|(p, q)| (p.tau - q.tau).abs() > 1e-9 * p.tau.max(q.tau))
    {
        return Err(mismatch);
    }
    Ok(())
}

pub fn stability_report(
    uncorrected: &AllanCurve,
    corrected: &AllanCurve,
) -> Result<StabilityReport, AnalysisError> {
    same_grid(uncorrected, corrected)?;
    let improvement = uncorrected
        .points
        .iter()
        .zip(&corrected.points)
        .map(|(u, c)| {
            if c.sigma > 0.0 {
                u.sigma / c.sigma
            } else if u.sigma == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let best = corrected
        .points
        .iter()
        .min_by(|a, b| a.sigma.total_cmp(&b.sigma))
        .expect("non-empty");
    let first = corrected.points[0].tau;
    let upper = if corrected
        .points
        .iter()
        .filter(|p| p.tau <= best.tau)
        .count()
        >= 3
    {
        best.tau
    } else {
        f64::INFINITY
    };
    let corrected_slope = loglog_slope(corrected, first, upper).unwrap_or(f64::NAN);
    Ok(StabilityReport {
        taus: corrected.taus(),
        improvement,
        optimum_tau: best.tau,
        optimum_sigma: best.sigma,
        corrected_slope,
        deviates_from_white: !((corrected_slope + 0.5).abs() <= 0.1),
    })
}

/// Two-sided paired t-test; returns `(t, p)`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64), AnalysisError> {
    let n = a.len().min(b.len());
    if n < 2 || a.len() != b.len() {
        return Err(AnalysisError::TooFewPoints { needed: 2, got: n });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("dof ≥ 1");
    Ok((t, 2.0 * (1.0 - dist.cdf(t.abs()))))
}
