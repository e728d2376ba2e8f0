//! Interleaved six-measurement acquisition: nuclear Ramsey at θ = ±90°
//! plus four ESR probes, repeated `n_r` times per block, with the
//! controller updating frequencies between blocks.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{BlockDecision, ControlError, Controller, FeedbackState};
use crate::environment::{sample_mean, stream_seed, FieldTrajectory, NoiseModel, SampleKind};
use crate::estimation::{EstimationError, FourPointReading};
use crate::spinmodel::{
    esr_spectrum, mapping_fidelity, ramsey_fringe, ParamError, Readout, SensorParams, Spin,
};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid sequence setting `{name}`: {reason}")]
    Config { name: &'static str, reason: String },
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("block start {t_start} s does not follow the previous block at {previous} s")]
    NonMonotonic { t_start: f64, previous: f64 },
    #[error("degenerate contrast denominator {0}")]
    DegenerateContrast(f64),
    #[error("duration {duration} s is shorter than one block ({block} s)")]
    DurationTooShort { duration: f64, block: f64 },
    #[error("run aborted after {} blocks: {source}", partial.records.len())]
    Aborted {
        partial: Box<ExperimentRun>,
        source: ControlError,
    },
}

/// Standard block-timing presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingPreset {
    /// Acquisition plus update take about one minute per block.
    Minute,
    /// 2000 sequences take 25 s including the dead time.
    TwentyFiveSecond,
}

/// Settings of one interleaved acquisition block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceConfig {
    /// Free-precession time of the Ramsey sequence, seconds.
    pub t_ramsey: f64,
    /// Final-pulse phases of the two halves, radians.
    pub theta_plus: f64,
    pub theta_minus: f64,
    /// Probe offsets from the tracked ESR centre, Hz.
    pub esr_offsets: [f64; 4],
    pub n_r: usize,
    /// Idle time after each block for transfer and update, seconds.
    pub block_dead_time: f64,
    /// Wall-clock length of one six-measurement sequence, seconds.
    pub sequence_length: f64,
    pub use_mapping: bool,
    /// Spin carrying the Ramsey phase.
    pub spin: Spin,
    /// Emulated rotation rate, deg/s; enters as extra phase Ω·t_ramsey.
    pub emulated_rotation: f64,
    /// Programmed detuning of the Ramsey drive, Hz.
    pub drive_detuning: f64,
    /// Number of contiguous sub-averages kept per block.
    pub segments_per_block: usize,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            t_ramsey: 600e-6,
            theta_plus: PI / 2.0,
            theta_minus: -PI / 2.0,
            esr_offsets: [-700e3, -350e3, 350e3, 700e3],
            n_r: 2000,
            block_dead_time: 50.0,
            sequence_length: 1e-3,
            use_mapping: true,
            spin: Spin::Nuclear,
            emulated_rotation: 0.0,
            drive_detuning: 0.0,
            segments_per_block: 1,
        }
    }
}

impl SequenceConfig {
    pub fn with_timing(mut self, preset: TimingPreset) -> Self {
        self.n_r = 2000;
        self.sequence_length = 1e-3;
        self.block_dead_time = match preset {
            TimingPreset::Minute => 58.0,
            TimingPreset::TwentyFiveSecond => 23.0,
        };
        self
    }

    pub fn readout(&self) -> Readout {
        match (self.spin, self.use_mapping) {
            (Spin::Electronic, _) => Readout::Electronic,
            (Spin::Nuclear, true) => Readout::NuclearMapped,
            (Spin::Nuclear, false) => Readout::NuclearUnmapped,
        }
    }

    /// Time spent acquiring within one block.
    pub fn active_time(&self) -> f64 {
        self.n_r as f64 * self.sequence_length
    }

    /// Start-to-start spacing of consecutive blocks.
    pub fn block_period(&self) -> f64 {
        self.active_time() + self.block_dead_time
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |name, reason: &str| {
            Err(ProtocolError::Config {
                name,
                reason: reason.to_string(),
            })
        };
        for (name, v) in [
            ("t_ramsey", self.t_ramsey),
            ("block_dead_time", self.block_dead_time),
            ("sequence_length", self.sequence_length),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name, &format!("must be strictly positive, got {v}"));
            }
        }
        if self.n_r == 0 {
            return bad("n_r", "must be at least 1");
        }
        if self.segments_per_block == 0 || self.segments_per_block > self.n_r {
            return bad("segments_per_block", "must be between 1 and n_r");
        }
        if self.esr_offsets.windows(2).any(|w| !(w[1] > w[0])) {
            return bad("esr_offsets", "must be strictly increasing");
        }
        if !self.emulated_rotation.is_finite() || !self.drive_detuning.is_finite() {
            return bad("emulated_rotation", "must be finite");
        }
        Ok(())
    }
}

/// `(S₉₀ − S₋₉₀)/(S₉₀ + S₋₉₀)`; the mapped-readout signal F.
pub fn contrast_f(s_plus: f64, s_minus: f64) -> Result<f64, ProtocolError> {
    let den = s_plus + s_minus;
    if !(den > 0.0) {
        return Err(ProtocolError::DegenerateContrast(den));
    }
    Ok((s_plus - s_minus) / den)
}

/// Same quotient on the unmapped readout `S'`; the signal G.
pub fn contrast_g(s_plus_raw: f64, s_minus_raw: f64) -> Result<f64, ProtocolError> {
    contrast_f(s_plus_raw, s_minus_raw)
}

/// Frequencies actually driven during a block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AppliedFrequencies {
    pub probes: [f64; 4],
    pub mapping: f64,
    pub nuclear_drive: f64,
}

/// Contiguous sub-average of a block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub t_mid: f64,
    pub s_plus: f64,
    pub s_minus: f64,
}

/// Block-averaged outputs of one acquisition block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionRecord {
    pub t_start: f64,
    pub s_plus: f64,
    pub s_minus: f64,
    pub esr_samples: [f64; 4],
    pub applied: AppliedFrequencies,
    pub n_averaged: usize,
    pub readout: Readout,
    pub segments: Vec<Segment>,
}

impl AcquisitionRecord {
    /// F for a mapped readout, G otherwise.
    pub fn contrast(&self) -> Result<f64, ProtocolError> {
        contrast_f(self.s_plus, self.s_minus)
    }

    pub fn four_point_reading(&self) -> Result<FourPointReading, EstimationError> {
        FourPointReading::new(self.applied.probes, self.esr_samples)
    }
}

/// Runs blocks against a field trajectory, drawing readout noise from a
/// single seeded stream in block order.
pub struct BlockRunner<'a> {
    params: &'a SensorParams,
    config: &'a SequenceConfig,
    trajectory: &'a FieldTrajectory,
    noise: &'a NoiseModel,
    rng: ChaCha8Rng,
    previous: Option<f64>,
}

impl<'a> BlockRunner<'a> {
    pub fn new(
        params: &'a SensorParams,
        config: &'a SequenceConfig,
        trajectory: &'a FieldTrajectory,
        noise: &'a NoiseModel,
        seed: u64,
    ) -> Result<Self, ProtocolError> {
        params.validate()?;
        config.validate()?;
        noise.validate().map_err(|e| ProtocolError::Config {
            name: "noise",
            reason: e.to_string(),
        })?;
        Ok(Self {
            params,
            config,
            trajectory,
            noise,
            rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, 0x6e6f697365, 0)),
            previous: None,
        })
    }

    /// Simulates one block of `n_r` repetitions starting at `t_start`.
    pub fn run_block(
        &mut self,
        feedback: &FeedbackState,
        t_start: f64,
    ) -> Result<AcquisitionRecord, ProtocolError> {
        if let Some(previous) = self.previous {
            if !(t_start > previous) {
                return Err(ProtocolError::NonMonotonic { t_start, previous });
            }
        }
        self.previous = Some(t_start);

        let p = self.params;
        let cfg = self.config;
        let readout = cfg.readout();
        let spin = readout.spin();
        let t_r = cfg.t_ramsey;
        let decay = (-t_r / p.t2_star(spin)).exp();
        let base_contrast = p.contrast(readout) * decay;
        let rotation_phase = cfg.emulated_rotation * PI / 180.0 * t_r;
        // phase runs at (transition − drive); the drive sits at ν + detuning + correction
        let correction = match spin {
            Spin::Nuclear => feedback.nuclear_correction,
            Spin::Electronic => 0.0,
        };
        let drive_phase = 2.0 * PI * (cfg.drive_detuning + correction) * t_r;
        let probes = feedback.probe_frequencies(&cfg.esr_offsets);
        let mapping = feedback.mapping_frequency();
        let (gamma_phase, line_shift_per_gauss) = match spin {
            Spin::Nuclear => (p.gamma_n, -p.gamma_e),
            Spin::Electronic => (-p.gamma_e, -p.gamma_e),
        };

        let n = cfg.n_r;
        let segs = cfg.segments_per_block;
        let mut seg_plus = vec![0.0; segs];
        let mut seg_minus = vec![0.0; segs];
        let mut seg_count = vec![0usize; segs];
        let mut esr = [0.0; 4];

        for j in 0..n {
            let t = t_start + j as f64 * cfg.sequence_length;
            let b = self.trajectory.field_at(t);
            let shift = line_shift_per_gauss * b;
            let phase = 2.0 * PI * gamma_phase * b * t_r + rotation_phase - drive_phase;
            let contrast = if readout == Readout::NuclearMapped {
                let detuning = (p.nu_e + shift) - mapping;
                base_contrast * mapping_fidelity(detuning, p)
            } else {
                base_contrast
            };
            let s = j * segs / n;
            seg_plus[s] += ramsey_fringe(cfg.theta_plus, 0.0, phase, contrast, 1.0);
            seg_minus[s] += ramsey_fringe(cfg.theta_minus, 0.0, phase, contrast, 1.0);
            seg_count[s] += 1;
            for (acc, &f) in esr.iter_mut().zip(&probes) {
                *acc += esr_spectrum(f, shift, p);
            }
        }

        let mut segments = Vec::with_capacity(segs);
        let (mut sum_plus, mut sum_minus) = (0.0, 0.0);
        let mut first = 0usize;
        for s in 0..segs {
            let count = seg_count[s];
            let mean_plus = seg_plus[s] / count as f64;
            let mean_minus = seg_minus[s] / count as f64;
            let noisy_plus = sample_mean(
                mean_plus,
                count,
                self.noise,
                SampleKind::Ramsey,
                &mut self.rng,
            );
            let noisy_minus = sample_mean(
                mean_minus,
                count,
                self.noise,
                SampleKind::Ramsey,
                &mut self.rng,
            );
            sum_plus += noisy_plus * count as f64;
            sum_minus += noisy_minus * count as f64;
            let t_mid = t_start + (first as f64 + 0.5 * count as f64) * cfg.sequence_length;
            segments.push(Segment {
                t_mid,
                s_plus: noisy_plus,
                s_minus: noisy_minus,
            });
            first += count;
        }
        let esr_samples = esr.map(|acc| {
            sample_mean(
                acc / n as f64,
                n,
                self.noise,
                SampleKind::Esr,
                &mut self.rng,
            )
        });

        Ok(AcquisitionRecord {
            t_start,
            s_plus: sum_plus / n as f64,
            s_minus: sum_minus / n as f64,
            esr_samples,
            applied: AppliedFrequencies {
                probes,
                mapping,
                nuclear_drive: p.nu_n + cfg.drive_detuning + feedback.nuclear_correction,
            },
            n_averaged: n,
            readout,
            segments,
        })
    }
}

/// Record stream and feedback log of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRun {
    pub records: Vec<AcquisitionRecord>,
    pub decisions: Vec<BlockDecision>,
    pub final_state: FeedbackState,
}

impl ExperimentRun {
    /// Block-level contrast series `(t_start, F or G)`.
    pub fn contrast_series(&self) -> Result<Vec<(f64, f64)>, ProtocolError> {
        self.records
            .iter()
            .map(|r| Ok((r.t_start, r.contrast()?)))
            .collect()
    }

    /// Segment-level contrast series `(t_mid, F or G)`.
    pub fn segment_series(&self) -> Result<Vec<(f64, f64)>, ProtocolError> {
        self.records
            .iter()
            .flat_map(|r| r.segments.iter())
            .map(|s| Ok((s.t_mid, contrast_f(s.s_plus, s.s_minus)?)))
            .collect()
    }
}

/// Number of blocks that fit in `duration`.
pub fn block_count(config: &SequenceConfig, duration: f64) -> usize {
    let active = config.active_time();
    if duration < active {
        return 0;
    }
    ((duration - active) / config.block_period()).floor() as usize + 1
}

/// Alternates blocks and controller updates until `duration` is used up.
pub fn run_experiment(
    params: &SensorParams,
    config: &SequenceConfig,
    trajectory: &FieldTrajectory,
    noise: &NoiseModel,
    controller: &mut dyn Controller,
    duration: f64,
    seed: u64,
) -> Result<ExperimentRun, ProtocolError> {
    let mut runner = BlockRunner::new(params, config, trajectory, noise, seed)?;
    let blocks = block_count(config, duration);
    if blocks == 0 {
        return Err(ProtocolError::DurationTooShort {
            duration,
            block: config.active_time(),
        });
    }
    let mut state = controller.initial_state(params);
    let mut records = Vec::with_capacity(blocks);
    let mut decisions = Vec::with_capacity(blocks);
    let period = config.block_period();
    for k in 0..blocks {
        let t_start = k as f64 * period;
        let record = runner.run_block(&state, t_start)?;
        match controller.update(&state, &record) {
            Ok((next, kind, estimate)) => {
                decisions.push(BlockDecision::from_state(k, t_start, kind, estimate, &next));
                state = next;
                records.push(record);
            }
            Err(source) => {
                records.push(record);
                return Err(ProtocolError::Aborted {
                    partial: Box::new(ExperimentRun {
                        records,
                        decisions,
                        final_state: state,
                    }),
                    source,
                });
            }
        }
    }
    Ok(ExperimentRun {
        records,
        decisions,
        final_state: state,
    })
}
