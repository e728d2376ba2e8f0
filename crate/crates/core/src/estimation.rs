//! Four-point ESR line-centre estimation and rotation-rate sensitivity.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::FeedbackState;
use crate::environment::{FieldTrajectory, NoiseModel};
use crate::protocol::{BlockRunner, ProtocolError, SequenceConfig};
use crate::spinmodel::{lorentzian, SensorParams};

/// Default relative tolerance on the secant-slope difference.
pub const DEFAULT_PARALLEL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("probe frequencies must be strictly increasing: {0:?}")]
    UnorderedProbes([f64; 4]),
    #[error(
        "ESR line outside the four-point capture range \
         (secant slopes {left:.3e}, {right:.3e} per Hz)"
    )]
    OutOfBand { left: f64, right: f64 },
    #[error("sensitivity needs at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("slope calibration is zero or not finite: {0}")]
    Uncalibrated(f64),
    #[error("sample time must be strictly positive, got {0}")]
    BadSampleTime(f64),
    #[error("phase sweep is not sinusoidal (relative residual {residual:.3e})")]
    FitFailure { residual: f64 },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Fluorescence sampled at four increasing probe frequencies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FourPointReading {
    pub frequencies: [f64; 4],
    pub signals: [f64; 4],
}

impl FourPointReading {
    pub fn new(frequencies: [f64; 4], signals: [f64; 4]) -> Result<Self, EstimationError> {
        if frequencies.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(EstimationError::UnorderedProbes(frequencies));
        }
        Ok(Self {
            frequencies,
            signals,
        })
    }
}

/// Secant slopes through points (1,2) and (3,4).
pub fn secant_slopes(reading: &FourPointReading) -> (f64, f64) {
    let [f1, f2, f3, f4] = reading.frequencies;
    let [s1, s2, s3, s4] = reading.signals;
    ((s2 - s1) / (f2 - f1), (s4 - s3) / (f4 - f3))
}

/// Slope difference of the two secants when the dominant line sits exactly
/// at the centre of the probe set. Used to scale the parallel tolerance.
pub fn nominal_slope_difference(offsets: &[f64; 4], params: &SensorParams) -> f64 {
    let depth = params.esr_contrast * params.nuclear_polarization;
    let l = |x: f64| lorentzian(x, params.esr_linewidth);
    let left = -depth * (l(offsets[1]) - l(offsets[0])) / (offsets[1] - offsets[0]);
    let right = -depth * (l(offsets[3]) - l(offsets[2])) / (offsets[3] - offsets[2]);
    right - left
}

/// Two-secant intersection estimator with out-of-band rejection.
///
/// In band the left secant descends into the dip and the right one climbs
/// out of it; when either sign flips, or the two secants become parallel to
/// within `tolerance · nominal_difference`, the line has left the capture
/// range and no estimate is produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FourPointEstimator {
    pub nominal_difference: f64,
    pub tolerance: f64,
}

impl FourPointEstimator {
    pub fn new(offsets: &[f64; 4], params: &SensorParams, tolerance: f64) -> Self {
        Self {
            nominal_difference: nominal_slope_difference(offsets, params),
            tolerance,
        }
    }

    pub fn estimate(&self, reading: &FourPointReading) -> Result<f64, EstimationError> {
        let (left, right) = secant_slopes(reading);
        if !(left < 0.0 && right > 0.0)
            || right - left < self.tolerance * self.nominal_difference.abs()
        {
            return Err(EstimationError::OutOfBand { left, right });
        }
        Ok(intersection(reading, left, right))
    }
}

fn intersection(reading: &FourPointReading, left: f64, right: f64) -> f64 {
    // Work relative to the probe centroid to keep GHz offsets out of the
    // cancellation.
    let reference = reading.frequencies.iter().sum::<f64>() / 4.0;
    let u1 = reading.frequencies[0] - reference;
    let u3 = reading.frequencies[2] - reference;
    let [s1, _, s3, _] = reading.signals;
    let x = (s3 - s1 + left * u1 - right * u3) / (left - right);
    reference + x
}

/// Abscissa of the intersection of the secants (1,2) and (3,4).
///
/// Fails only on exactly parallel secants; use [`FourPointEstimator`] for the
/// capture-range check.
pub fn four_point_estimate(reading: &FourPointReading) -> Result<f64, EstimationError> {
    let (left, right) = secant_slopes(reading);
    if left == right {
        return Err(EstimationError::OutOfBand { left, right });
    }
    Ok(intersection(reading, left, right))
}

/// Rotation-rate sensitivity of a signal series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    /// deg·s⁻¹/√Hz
    pub eta: f64,
    /// Standard error of the mean of the series.
    pub sigma_f: f64,
    /// Signal change per deg/s.
    pub slope: f64,
    /// Total acquisition time, seconds.
    pub t_total: f64,
}

/// `η = σ_f(T)·√T / |dS/dΩ|` for a series whose samples each integrate
/// `sample_time` seconds of acquisition.
pub fn sensitivity(
    series: &[f64],
    sample_time: f64,
    slope: f64,
) -> Result<SensitivityReport, EstimationError> {
    let n = series.len();
    if n < 2 {
        return Err(EstimationError::TooFewSamples(n));
    }
    if !(slope != 0.0 && slope.is_finite()) {
        return Err(EstimationError::Uncalibrated(slope));
    }
    if !(sample_time > 0.0 && sample_time.is_finite()) {
        return Err(EstimationError::BadSampleTime(sample_time));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let var = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sigma_f = (var / n as f64).sqrt();
    let t_total = n as f64 * sample_time;
    Ok(SensitivityReport {
        eta: sigma_f * t_total.sqrt() / slope.abs(),
        sigma_f,
        slope: slope.abs(),
        t_total,
    })
}

/// Result of a final-pulse phase sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeCalibration {
    /// Maximum `dF/dΩ`, contrast per deg/s.
    pub slope: f64,
    /// Factor dividing a contrast-unit deviation into deg/s.
    pub scale_factor_s: f64,
    /// Fitted fringe amplitude of the contrast signal.
    pub amplitude: f64,
    /// Phase offset of the fitted fringe, radians.
    pub phase: f64,
    /// `(θ offset in radians, contrast)` pairs of the sweep.
    pub sweep: Vec<(f64, f64)>,
}

/// Sweep of the final-pulse phase across a full period and the resulting
/// contrast values, evaluated through the block simulator with a quiet field
/// and silent readout.
pub fn phase_sweep(
    params: &SensorParams,
    config: &SequenceConfig,
    points: usize,
) -> Result<Vec<(f64, f64)>, EstimationError> {
    let trajectory = FieldTrajectory::quiet();
    let noise = NoiseModel::off();
    let feedback = FeedbackState::new(params);
    let mut sweep = Vec::with_capacity(points);
    for k in 0..points {
        let offset = 2.0 * PI * k as f64 / points as f64;
        let cfg = SequenceConfig {
            theta_plus: config.theta_plus + offset,
            theta_minus: config.theta_minus + offset,
            n_r: 1,
            segments_per_block: 1,
            ..config.clone()
        };
        let mut runner = BlockRunner::new(params, &cfg, &trajectory, &noise, 0)?;
        let record = runner.run_block(&feedback, 0.0)?;
        sweep.push((offset, record.contrast()?));
    }
    Ok(sweep)
}

/// Fits `a₀ + a·cos θ + b·sin θ` to a uniform full-period sweep and returns
/// the steepest slope converted to signal per deg/s.
pub fn slope_calibration(
    params: &SensorParams,
    config: &SequenceConfig,
) -> Result<SlopeCalibration, EstimationError> {
    let sweep = phase_sweep(params, config, 72)?;
    let n = sweep.len() as f64;
    let mean = sweep.iter().map(|p| p.1).sum::<f64>() / n;
    let a = 2.0 / n * sweep.iter().map(|(t, y)| y * t.cos()).sum::<f64>();
    let b = 2.0 / n * sweep.iter().map(|(t, y)| y * t.sin()).sum::<f64>();
    let amplitude = a.hypot(b);
    let rms_resid = (sweep
        .iter()
        .map(|(t, y)| (y - mean - a * t.cos() - b * t.sin()).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let residual = if amplitude > 0.0 {
        rms_resid / amplitude
    } else {
        f64::INFINITY
    };
    if !(residual < 1e-2) {
        return Err(EstimationError::FitFailure { residual });
    }
    let slope = amplitude * config.t_ramsey * PI / 180.0;
    Ok(SlopeCalibration {
        slope,
        scale_factor_s: slope,
        amplitude,
        phase: b.atan2(a),
        sweep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spinmodel::esr_spectrum;

    fn reading_at(shift: f64, params: &SensorParams, offsets: [f64; 4]) -> FourPointReading {
        let freqs = offsets.map(|o| params.nu_e + o);
        let signals = freqs.map(|f| esr_spectrum(f, shift, params));
        FourPointReading::new(freqs, signals).unwrap()
    }

    const OFFSETS: [f64; 4] = [-700e3, -350e3, 350e3, 700e3];

    #[test]
    fn symmetric_line_gives_exact_centre() {
        let params = SensorParams {
            nuclear_polarization: 1.0,
            ..SensorParams::default()
        };
        let est = four_point_estimate(&reading_at(0.0, &params, OFFSETS)).unwrap();
        // One ulp of a 1.7 GHz frequency is 2.4e-7 Hz.
        assert!((est - params.nu_e).abs() <= 2.0 * f64::EPSILON * params.nu_e);
    }

    #[test]
    fn rejects_unordered_probes() {
        assert!(matches!(
            FourPointReading::new([1.0, 3.0, 2.0, 4.0], [0.0; 4]),
            Err(EstimationError::UnorderedProbes(_))
        ));
    }

    #[test]
    fn exactly_parallel_secants_fail() {
        let r = FourPointReading::new([0.0, 1.0, 2.0, 3.0], [1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(matches!(
            four_point_estimate(&r),
            Err(EstimationError::OutOfBand { .. })
        ));
    }

    #[test]
    fn far_shift_is_out_of_band() {
        let params = SensorParams::default();
        let est = FourPointEstimator::new(&OFFSETS, &params, DEFAULT_PARALLEL_TOLERANCE);
        for shift in [2e6, -2e6] {
            let r = reading_at(shift, &params, OFFSETS);
            assert!(matches!(
                est.estimate(&r),
                Err(EstimationError::OutOfBand { .. })
            ));
        }
    }

    #[test]
    fn nominal_slope_difference_is_positive() {
        let params = SensorParams::default();
        let d = nominal_slope_difference(&OFFSETS, &params);
        // With the probes at fwhm/2√3 and fwhm/√3 the Lorentzian reads 3/4 and 3/7.
        let expected = 2.0 * (0.75 - 3.0 / 7.0) * params.esr_contrast * 0.95 / 350e3;
        assert!((d - expected).abs() < 1e-12 * expected.abs().max(1.0));
    }

    #[test]
    fn sensitivity_closed_form() {
        let series = [1.0, -1.0, 1.0, -1.0];
        let r = sensitivity(&series, 0.5, 2.0).unwrap();
        let sd = (4.0f64 / 3.0).sqrt();
        let sigma_f = sd / 2.0;
        assert!((r.sigma_f - sigma_f).abs() < 1e-15);
        assert!((r.eta - sigma_f * 2f64.sqrt() / 2.0).abs() < 1e-15);
        assert_eq!(r.t_total, 2.0);
    }

    #[test]
    fn sensitivity_errors() {
        assert!(matches!(
            sensitivity(&[1.0], 1.0, 1.0),
            Err(EstimationError::TooFewSamples(1))
        ));
        assert!(matches!(
            sensitivity(&[1.0, 2.0], 1.0, 0.0),
            Err(EstimationError::Uncalibrated(_))
        ));
    }
}
