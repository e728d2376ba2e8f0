//! Feedback controllers and the history-based predictor study.
//!
//! The production controller re-centres the four ESR probes and the mapping
//! pulse on the last four-point estimate and, with a non-zero gain, shifts
//! the nuclear drive by `δν_N = −g·(γ_n/γ_e)·δν_NV`.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::stream_seed;
use crate::estimation::{FourPointEstimator, DEFAULT_PARALLEL_TOLERANCE};
use crate::protocol::{AcquisitionRecord, SequenceConfig};
use crate::spinmodel::SensorParams;

pub const DEFAULT_HISTORY_CAPACITY: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("polynomial of degree {degree} needs at least {} points, got {points}", degree + 1)]
    Underdetermined { degree: usize, points: usize },
    #[error("predictor study needs at least one realization")]
    NoRealizations,
    #[error("invalid predictor study setting `{name}`: {value}")]
    BadStudy { name: &'static str, value: f64 },
    #[error("record carries a degenerate four-point reading: {0}")]
    BadReading(String),
}

/// Controller state carried from one block to the next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackState {
    /// Unperturbed electronic transition frequency, Hz.
    pub reference_center: f64,
    /// Tracked electronic transition frequency; the probes straddle it.
    pub esr_center: f64,
    /// Cumulative correction of the mapping pulse frequency, Hz.
    pub mapping_correction: f64,
    /// Cumulative correction of the nuclear drive frequency, Hz.
    pub nuclear_correction: f64,
    pub gain: f64,
    /// `(block time, estimated shift)` pairs, oldest first.
    pub history: VecDeque<(f64, f64)>,
    pub history_capacity: usize,
    gamma_ratio: f64,
}

impl FeedbackState {
    pub fn new(params: &SensorParams) -> Self {
        Self {
            reference_center: params.nu_e,
            esr_center: params.nu_e,
            mapping_correction: 0.0,
            nuclear_correction: 0.0,
            gain: 0.0,
            history: VecDeque::new(),
            history_capacity: DEFAULT_HISTORY_CAPACITY,
            gamma_ratio: params.gamma_n / params.gamma_e,
        }
    }

    pub fn with_gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }

    pub fn with_history_capacity(mut self, capacity: usize) -> Self {
        self.history_capacity = capacity.max(1);
        while self.history.len() > self.history_capacity {
            self.history.pop_front();
        }
        self
    }

    pub fn mapping_frequency(&self) -> f64 {
        self.reference_center + self.mapping_correction
    }

    pub fn probe_frequencies(&self, offsets: &[f64; 4]) -> [f64; 4] {
        offsets.map(|o| self.esr_center + o)
    }

    fn record(&mut self, t: f64, shift: f64) {
        if let Some(&(last, _)) = self.history.back() {
            debug_assert!(t >= last, "history must be time ordered");
        }
        self.history.push_back((t, shift));
        while self.history.len() > self.history_capacity {
            self.history.pop_front();
        }
    }
}

/// Re-centres the probes and the mapping pulse on `estimated_center`.
pub fn update_mapping(state: &FeedbackState, estimated_center: f64, t: f64) -> FeedbackState {
    let shift = estimated_center - state.esr_center;
    if shift == 0.0 {
        return state.clone();
    }
    let mut next = state.clone();
    next.esr_center = estimated_center;
    next.mapping_correction += shift;
    next.record(t, shift);
    next
}

/// Adds `gain · (−γ_n/γ_e) · estimated_shift` to the nuclear drive correction.
pub fn update_nuclear(state: &FeedbackState, estimated_shift: f64) -> FeedbackState {
    let mut next = state.clone();
    next.nuclear_correction += state.gain * (-state.gamma_ratio) * estimated_shift;
    next
}

/// One-step-ahead prediction from a least-squares polynomial of `degree`
/// fitted to `history` sampled at unit spacing.
pub fn predict_next(history: &[f64], degree: usize) -> Result<f64, ControlError> {
    let n = history.len();
    if n < degree + 1 {
        return Err(ControlError::Underdetermined { degree, points: n });
    }
    if n == degree + 1 {
        // Newton forward extrapolation: Σ (−1)^(n−1−j) C(n, j) y_j.
        let mut binom = 1.0;
        let mut acc = 0.0;
        for (j, &y) in history.iter().enumerate() {
            let sign = if (n - 1 - j).is_multiple_of(2) {
                1.0
            } else {
                -1.0
            };
            acc += sign * binom * y;
            binom = binom * (n - j) as f64 / (j + 1) as f64;
        }
        return Ok(acc);
    }
    Ok(least_squares_extrapolate(history, degree))
}

fn least_squares_extrapolate(y: &[f64], degree: usize) -> f64 {
    // Columns of the Vandermonde matrix on x scaled to [-1, 1], orthogonalised
    // with modified Gram–Schmidt.
    let n = y.len();
    let half = (n - 1) as f64 / 2.0;
    let scale = |i: f64| (i - half) / half.max(1.0);
    let xs: Vec<f64> = (0..n).map(|i| scale(i as f64)).collect();
    let x_next = scale(n as f64);

    let cols = degree + 1;
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    // Track how the next-point row transforms alongside the columns.
    let mut q_next: Vec<f64> = Vec::with_capacity(cols);
    for p in 0..cols {
        let mut v: Vec<f64> = xs.iter().map(|x| x.powi(p as i32)).collect();
        let mut v_next = x_next.powi(p as i32);
        for (qk, &qk_next) in q.iter().zip(&q_next) {
            let r: f64 = qk.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (vi, qi) in v.iter_mut().zip(qk) {
                *vi -= r * qi;
            }
            v_next -= r * qk_next;
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        q.push(v);
        q_next.push(v_next / norm);
    }
    q.iter()
        .zip(&q_next)
        .map(|(qk, &qn)| qn * qk.iter().zip(y).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

/// What the controller did after one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    Hold,
    Applied,
    OutOfBand,
}

/// Per-block feedback log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDecision {
    pub block: usize,
    pub t_start: f64,
    pub kind: DecisionKind,
    pub estimate: Option<f64>,
    pub esr_center: f64,
    pub mapping_correction: f64,
    pub nuclear_correction: f64,
}

impl BlockDecision {
    pub fn from_state(
        block: usize,
        t_start: f64,
        kind: DecisionKind,
        estimate: Option<f64>,
        state: &FeedbackState,
    ) -> Self {
        Self {
            block,
            t_start,
            kind,
            estimate,
            esr_center: state.esr_center,
            mapping_correction: state.mapping_correction,
            nuclear_correction: state.nuclear_correction,
        }
    }
}

/// A per-block feedback policy.
pub trait Controller {
    fn initial_state(&self, params: &SensorParams) -> FeedbackState;

    fn update(
        &mut self,
        state: &FeedbackState,
        record: &AcquisitionRecord,
    ) -> Result<(FeedbackState, DecisionKind, Option<f64>), ControlError>;
}

/// Leaves every frequency where it started.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoFeedback;

impl Controller for NoFeedback {
    fn initial_state(&self, params: &SensorParams) -> FeedbackState {
        FeedbackState::new(params)
    }

    fn update(
        &mut self,
        state: &FeedbackState,
        _record: &AcquisitionRecord,
    ) -> Result<(FeedbackState, DecisionKind, Option<f64>), ControlError> {
        Ok((state.clone(), DecisionKind::Hold, None))
    }
}

/// Four-point tracking of the ESR line with mapping-pulse and nuclear-drive
/// correction. With `predictor_degree = 0` the next centre is the last
/// estimate; higher degrees extrapolate the recent estimates.
#[derive(Debug, Clone)]
pub struct CrossSensorFeedback {
    pub gain: f64,
    pub predictor_degree: usize,
    pub history_capacity: usize,
    estimator: FourPointEstimator,
    estimates: VecDeque<f64>,
}

impl CrossSensorFeedback {
    pub fn new(params: &SensorParams, sequence: &SequenceConfig, gain: f64) -> Self {
        Self {
            gain,
            predictor_degree: 0,
            history_capacity: DEFAULT_HISTORY_CAPACITY,
            estimator: FourPointEstimator::new(
                &sequence.esr_offsets,
                params,
                DEFAULT_PARALLEL_TOLERANCE,
            ),
            estimates: VecDeque::new(),
        }
    }

    pub fn with_predictor(mut self, degree: usize) -> Self {
        self.predictor_degree = degree;
        self
    }

    pub fn with_history_capacity(mut self, capacity: usize) -> Self {
        self.history_capacity = capacity.max(1);
        self
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.estimator.tolerance = tolerance;
        self
    }

    fn next_center(&mut self, estimate: f64, reference: f64) -> f64 {
        let need = self.predictor_degree + 1;
        self.estimates.push_back(estimate - reference);
        while self.estimates.len() > need.max(self.history_capacity.min(need)) {
            self.estimates.pop_front();
        }
        if self.predictor_degree == 0 || self.estimates.len() < need {
            return estimate;
        }
        let recent: Vec<f64> = self.estimates.iter().copied().collect();
        match predict_next(&recent, self.predictor_degree) {
            Ok(p) => reference + p,
            Err(_) => estimate,
        }
    }
}

impl Controller for CrossSensorFeedback {
    fn initial_state(&self, params: &SensorParams) -> FeedbackState {
        FeedbackState::new(params)
            .with_gain(self.gain)
            .with_history_capacity(self.history_capacity)
    }

    fn update(
        &mut self,
        state: &FeedbackState,
        record: &AcquisitionRecord,
    ) -> Result<(FeedbackState, DecisionKind, Option<f64>), ControlError> {
        let reading = record
            .four_point_reading()
            .map_err(|e| ControlError::BadReading(e.to_string()))?;
        let estimate = match self.estimator.estimate(&reading) {
            Ok(e) => e,
            Err(_) => return Ok((state.clone(), DecisionKind::OutOfBand, None)),
        };
        let target = self.next_center(estimate, state.reference_center);
        let shift = target - state.esr_center;
        let tracked = update_mapping(state, target, record.t_start);
        let next = update_nuclear(&tracked, shift);
        Ok((next, DecisionKind::Applied, Some(estimate)))
    }
}

/// Settings of the simulated history-based correction study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    /// Amplitude of the sinusoidal perturbation.
    pub perturbation_amplitude: f64,
    /// Standard deviations of the additive Gaussian noise, one grid row each.
    pub noise_amplitudes: Vec<f64>,
    /// Polynomial degrees, one grid column each.
    pub degrees: Vec<usize>,
    pub realizations: usize,
    pub samples_per_period: f64,
    /// Length of each simulated trace, in samples.
    pub trace_length: usize,
    /// Points per fit; `None` uses `degree + 1`.
    pub fit_points: Option<usize>,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            perturbation_amplitude: 1.0,
            noise_amplitudes: vec![0.0, 0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0],
            degrees: (0..=5).collect(),
            realizations: 20,
            samples_per_period: 50.0,
            trace_length: 500,
            fit_points: None,
            seed: 0,
        }
    }
}

/// Mean absolute one-step prediction error per (noise amplitude, degree).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorGrid {
    pub noise_amplitudes: Vec<f64>,
    pub degrees: Vec<usize>,
    /// `mean_error[row][col]`, averaged over realizations.
    pub mean_error: Vec<Vec<f64>>,
    /// `per_realization[row][col][r]`: trace-mean error of realization `r`.
    pub per_realization: Vec<Vec<Vec<f64>>>,
}

impl ErrorGrid {
    pub fn row(&self, noise: f64) -> Option<usize> {
        self.noise_amplitudes.iter().position(|&a| a == noise)
    }

    pub fn col(&self, degree: usize) -> Option<usize> {
        self.degrees.iter().position(|&d| d == degree)
    }
}

/// Sinusoid plus Gaussian noise, with a random phase per realization.
pub fn perturbation_trace(config: &StudyConfig, noise: f64, rng: &mut impl Rng) -> Vec<f64> {
    let phase = 2.0 * PI * rng.random::<f64>();
    (0..config.trace_length)
        .map(|k| {
            let clean = config.perturbation_amplitude
                * (2.0 * PI * k as f64 / config.samples_per_period + phase).sin();
            let z: f64 = rng.sample(StandardNormal);
            clean + noise * z
        })
        .collect()
}

/// Mean of `|x[k] − predict(x[k−N..k])|` for `k ≥ start`.
pub fn trace_error(
    trace: &[f64],
    degree: usize,
    points: usize,
    start: usize,
) -> Result<f64, ControlError> {
    let start = start.max(points);
    let mut total = 0.0;
    let mut count = 0usize;
    for k in start..trace.len() {
        let predicted = predict_next(&trace[k - points..k], degree)?;
        total += (trace[k] - predicted).abs();
        count += 1;
    }
    Ok(if count == 0 {
        f64::NAN
    } else {
        total / count as f64
    })
}

pub fn predictor_study(config: &StudyConfig) -> Result<ErrorGrid, ControlError> {
    if config.realizations == 0 {
        return Err(ControlError::NoRealizations);
    }
    if !(config.samples_per_period > 0.0) {
        return Err(ControlError::BadStudy {
            name: "samples_per_period",
            value: config.samples_per_period,
        });
    }
    let points_for = |d: usize| config.fit_points.unwrap_or(d + 1).max(d + 1);
    let warmup = config
        .degrees
        .iter()
        .map(|&d| points_for(d))
        .max()
        .unwrap_or(1);
    if config.trace_length <= warmup {
        return Err(ControlError::BadStudy {
            name: "trace_length",
            value: config.trace_length as f64,
        });
    }
    let per_realization: Vec<Vec<Vec<f64>>> = config
        .noise_amplitudes
        .par_iter()
        .enumerate()
        .map(|(row, &noise)| {
            let traces: Vec<Vec<f64>> = (0..config.realizations)
                .map(|r| {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(stream_seed(config.seed, row as u64, r as u64));
                    perturbation_trace(config, noise, &mut rng)
                })
                .collect();
            config
                .degrees
                .iter()
                .map(|&d| {
                    traces
                        .iter()
                        .map(|tr| trace_error(tr, d, points_for(d), warmup))
                        .collect::<Result<Vec<f64>, _>>()
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mean_error = per_realization
        .iter()
        .map(|row| {
            row.iter()
                .map(|errs| errs.iter().sum::<f64>() / errs.len() as f64)
                .collect()
        })
        .collect();
    Ok(ErrorGrid {
        noise_amplitudes: config.noise_amplitudes.clone(),
        degrees: config.degrees.clone(),
        mean_error,
        per_realization,
    })
}
