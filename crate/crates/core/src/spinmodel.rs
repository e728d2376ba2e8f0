//! Analytic signal models for the NV electronic spin and the ¹⁴N nuclear spin.
//!
//! Everything here is a pure function of an immutable [`SensorParams`]:
//! the ESR lineshape (three hyperfine Lorentzian dips), Ramsey fringes of
//! either spin, and the transfer probability of the selective mapping
//! π pulse used to read out the nuclear spin through the electronic one.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("sensor parameter `{name}` must be strictly positive, got {value}")]
    NotPositive { name: &'static str, value: f64 },
    #[error("sensor parameter `{name}` = {value} is outside {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
}

/// Which spin carries the Ramsey phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spin {
    Electronic,
    Nuclear,
}

/// Readout channel of a Ramsey measurement.
///
/// The nuclear spin can be read with the selective mapping pulse (`S`, high
/// contrast) or directly through the state-dependent fluorescence near the
/// excited-state anticrossing (`S'`, contrast lower by `mapping_contrast_gain`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    Electronic,
    NuclearMapped,
    NuclearUnmapped,
}

impl Readout {
    pub fn spin(self) -> Spin {
        match self {
            Readout::Electronic => Spin::Electronic,
            Readout::NuclearMapped | Readout::NuclearUnmapped => Spin::Nuclear,
        }
    }
}

/// Physical constants and calibration of both spin ensembles.
///
/// Frequencies in Hz, times in seconds, fields in gauss. Gyromagnetic ratios
/// are in Hz/G.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorParams {
    pub gamma_e: f64,
    pub gamma_n: f64,
    pub b0: f64,
    pub nu_e: f64,
    pub nu_n: f64,
    pub t2e_star: f64,
    pub t2n_star: f64,
    pub esr_contrast: f64,
    /// FWHM of one hyperfine line. The default puts the ±350 kHz probes on
    /// the maximum-slope points (`fwhm / 2√3`).
    pub esr_linewidth: f64,
    /// Spacing of the ¹⁴N hyperfine ESR lines. Not a measured value of this
    /// device: 2.16 MHz is the usual ¹⁴N literature figure.
    pub hyperfine_splitting: f64,
    pub nuclear_polarization: f64,
    /// Rabi frequency of the selective mapping pulse. The default is ten
    /// times the largest per-block line drift of a 0.14 G pp, 1000 s field
    /// with 52 s blocks.
    pub mapping_rabi: f64,
    pub mapping_contrast_gain: f64,
    /// Ramsey contrast of the mapped nuclear readout (population units).
    pub readout_contrast: f64,
    /// Ramsey contrast of the electronic-spin readout (population units).
    pub electronic_contrast: f64,
}

/// `2√3 · 350 kHz`.
pub const DEFAULT_ESR_LINEWIDTH: f64 = 1_212_435.565_298_214;

impl Default for SensorParams {
    fn default() -> Self {
        Self {
            gamma_e: 2.8e6,
            gamma_n: 0.3e3,
            b0: 420.0,
            nu_e: 1.704e9,
            nu_n: 4.68e6,
            t2e_star: 403e-9,
            t2n_star: 840e-6,
            esr_contrast: 0.03,
            esr_linewidth: DEFAULT_ESR_LINEWIDTH,
            hyperfine_splitting: 2.16e6,
            nuclear_polarization: 0.95,
            mapping_rabi: 640e3,
            mapping_contrast_gain: 3.0,
            readout_contrast: 0.03,
            electronic_contrast: 0.03,
        }
    }
}

impl SensorParams {
    /// Ramsey contrasts calibrated so that the steepest-point scale factor
    /// of the mapped contrast signal is 4.4e-6 per deg/s for a 600 µs
    /// accumulation (the unmapped one follows at a third of it).
    pub fn lab_calibrated() -> Self {
        Self {
            readout_contrast: 0.858,
            electronic_contrast: 0.858,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        let positive = [
            ("gamma_e", self.gamma_e),
            ("gamma_n", self.gamma_n),
            ("b0", self.b0),
            ("nu_e", self.nu_e),
            ("nu_n", self.nu_n),
            ("t2e_star", self.t2e_star),
            ("t2n_star", self.t2n_star),
            ("esr_linewidth", self.esr_linewidth),
            ("hyperfine_splitting", self.hyperfine_splitting),
            ("mapping_rabi", self.mapping_rabi),
            ("mapping_contrast_gain", self.mapping_contrast_gain),
            ("readout_contrast", self.readout_contrast),
            ("electronic_contrast", self.electronic_contrast),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ParamError::NotPositive { name, value });
            }
        }
        if !(self.esr_contrast > 0.0 && self.esr_contrast < 1.0) {
            return Err(ParamError::OutOfRange {
                name: "esr_contrast",
                value: self.esr_contrast,
                range: "(0, 1)",
            });
        }
        if !(0.0..=1.0).contains(&self.nuclear_polarization) {
            return Err(ParamError::OutOfRange {
                name: "nuclear_polarization",
                value: self.nuclear_polarization,
                range: "[0, 1]",
            });
        }
        for (name, value) in [
            ("readout_contrast", self.readout_contrast),
            ("electronic_contrast", self.electronic_contrast),
        ] {
            if value > 1.0 {
                return Err(ParamError::OutOfRange {
                    name,
                    value,
                    range: "(0, 1]",
                });
            }
        }
        Ok(())
    }

    pub fn gamma(&self, spin: Spin) -> f64 {
        match spin {
            Spin::Electronic => self.gamma_e,
            Spin::Nuclear => self.gamma_n,
        }
    }

    pub fn t2_star(&self, spin: Spin) -> f64 {
        match spin {
            Spin::Electronic => self.t2e_star,
            Spin::Nuclear => self.t2n_star,
        }
    }

    /// Undecayed fringe contrast of a readout channel with a perfect mapping pulse.
    pub fn contrast(&self, readout: Readout) -> f64 {
        match readout {
            Readout::Electronic => self.electronic_contrast,
            Readout::NuclearMapped => self.readout_contrast,
            Readout::NuclearUnmapped => self.readout_contrast / self.mapping_contrast_gain,
        }
    }

    /// Duration of the square mapping π pulse.
    pub fn mapping_pulse_duration(&self) -> f64 {
        0.5 / self.mapping_rabi
    }

    /// Hyperfine line centres and their weights, dominant (m_I = +1) line first.
    pub fn esr_lines(&self, detuning_offset: f64) -> [(f64, f64); 3] {
        let p = self.nuclear_polarization;
        let minor = 0.5 * (1.0 - p);
        let base = self.nu_e + detuning_offset;
        [
            (base, p),
            (base + self.hyperfine_splitting, minor),
            (base + 2.0 * self.hyperfine_splitting, minor),
        ]
    }
}

/// Peak-normalised Lorentzian with full width at half maximum `fwhm`.
pub fn lorentzian(x: f64, fwhm: f64) -> f64 {
    let hw = 0.5 * fwhm;
    hw * hw / (x * x + hw * hw)
}

/// Relative fluorescence of the pulsed ESR spectrum at `freq`.
///
/// `detuning_offset` shifts all three hyperfine lines together, which is how
/// a magnetic field change shows up on the electronic transition.
pub fn esr_spectrum(freq: f64, detuning_offset: f64, params: &SensorParams) -> f64 {
    let dip: f64 = params
        .esr_lines(detuning_offset)
        .iter()
        .map(|&(centre, weight)| weight * lorentzian(freq - centre, params.esr_linewidth))
        .sum();
    1.0 - params.esr_contrast * dip
}

/// Ramsey population signal with an explicit effective contrast and
/// dephasing time: `½[1 − C·exp(−t/T₂*)·cos(φ + θ)]`.
pub fn ramsey_fringe(theta: f64, t: f64, phase: f64, contrast: f64, t2_star: f64) -> f64 {
    0.5 * (1.0 - contrast * (-t / t2_star).exp() * (phase + theta).cos())
}

/// Ramsey signal of a readout channel with no programmed detuning.
pub fn ramsey_signal(
    theta: f64,
    t: f64,
    accumulated_phase: f64,
    readout: Readout,
    params: &SensorParams,
) -> f64 {
    ramsey_signal_detuned(theta, t, accumulated_phase, 0.0, readout, params)
}

/// Ramsey signal with a programmed detuning `detuning` (Hz) of the drive
/// from the spin resonance.
pub fn ramsey_signal_detuned(
    theta: f64,
    t: f64,
    accumulated_phase: f64,
    detuning: f64,
    readout: Readout,
    params: &SensorParams,
) -> f64 {
    let phase = 2.0 * PI * detuning * t + accumulated_phase;
    ramsey_fringe(
        theta,
        t,
        phase,
        params.contrast(readout),
        params.t2_star(readout.spin()),
    )
}

/// Slope `dS/dΦ` at the θ = π/2 bias point for small phases.
pub fn ramsey_bias_slope(t: f64, readout: Readout, params: &SensorParams) -> f64 {
    0.5 * params.contrast(readout) * (-t / params.t2_star(readout.spin())).exp()
}

/// Population transferred by a square π pulse (Rabi frequency
/// `mapping_rabi`) detuned by `pulse_detuning` Hz from its transition.
pub fn mapping_fidelity(pulse_detuning: f64, params: &SensorParams) -> f64 {
    let rabi = params.mapping_rabi;
    let generalized_sq = rabi * rabi + pulse_detuning * pulse_detuning;
    let amplitude = rabi * rabi / generalized_sq;
    let s = (PI * generalized_sq.sqrt() / (2.0 * rabi)).sin();
    amplitude * s * s
}
