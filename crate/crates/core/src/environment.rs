//! Magnetic field trajectory along the NV axis and readout noise.
//!
//! A [`FieldTrajectory`] is the sum of deterministic and stochastic terms.
//! Stochastic terms live on a fixed time grid whose Gaussian increments come
//! from streams keyed by `(seed, component index, chunk index)`, so a value
//! depends only on the spec and the queried time, never on query order.

use std::f64::consts::PI;
use std::sync::RwLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Photons per second reaching the photodiodes.
pub const FLUORESCENCE_RATE: f64 = 5e13;
/// Length of one optical readout window, seconds.
pub const READOUT_WINDOW: f64 = 30e-6;

const CHUNK: usize = 1024;

#[derive(Debug, Error, PartialEq)]
pub enum EnvironmentError {
    #[error("field component {index}: `{name}` must be strictly positive, got {value}")]
    NotPositive {
        index: usize,
        name: &'static str,
        value: f64,
    },
    #[error("field grid step must be strictly positive, got {0}")]
    BadGrid(f64),
    #[error("noise parameter `{name}` is invalid: {value}")]
    BadNoise { name: &'static str, value: f64 },
}

/// One additive term of the field, in gauss relative to the bias field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldComponent {
    Sinusoid {
        amplitude_pp: f64,
        period: f64,
        #[serde(default)]
        phase: f64,
    },
    /// Wiener process with `Var[b(t)] = diffusion · t`.
    RandomWalk {
        diffusion: f64,
    },
    /// Stationary Ornstein–Uhlenbeck process.
    OrnsteinUhlenbeck {
        sigma: f64,
        correlation_time: f64,
    },
    Constant {
        offset: f64,
    },
}

impl FieldComponent {
    fn is_stochastic(&self) -> bool {
        matches!(
            self,
            FieldComponent::RandomWalk { .. } | FieldComponent::OrnsteinUhlenbeck { .. }
        )
    }

    fn validate(&self, index: usize) -> Result<(), EnvironmentError> {
        let check = |name, value: f64| {
            if value > 0.0 && value.is_finite() {
                Ok(())
            } else {
                Err(EnvironmentError::NotPositive { index, name, value })
            }
        };
        match *self {
            FieldComponent::Sinusoid {
                amplitude_pp,
                period,
                ..
            } => {
                check("period", period)?;
                if !amplitude_pp.is_finite() {
                    return Err(EnvironmentError::NotPositive {
                        index,
                        name: "amplitude_pp",
                        value: amplitude_pp,
                    });
                }
                Ok(())
            }
            FieldComponent::RandomWalk { diffusion } => check("diffusion", diffusion),
            FieldComponent::OrnsteinUhlenbeck {
                sigma,
                correlation_time,
            } => {
                check("sigma", sigma)?;
                check("correlation_time", correlation_time)
            }
            FieldComponent::Constant { .. } => Ok(()),
        }
    }
}

fn default_grid_step() -> f64 {
    1.0
}

/// Serializable description of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    #[serde(default)]
    pub components: Vec<FieldComponent>,
    #[serde(default)]
    pub seed: u64,
    /// Grid spacing of the stochastic terms, seconds.
    #[serde(default = "default_grid_step")]
    pub grid_step: f64,
}

impl Default for FieldSpec {
    fn default() -> Self {
        Self {
            components: Vec::new(),
            seed: 0,
            grid_step: default_grid_step(),
        }
    }
}

impl FieldSpec {
    pub fn quiet() -> Self {
        Self::default()
    }

    pub fn with_component(mut self, component: FieldComponent) -> Self {
        self.components.push(component);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// SplitMix64 finaliser, used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent 64-bit seed for sub-stream `(a, b)` of `seed`.
pub fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    mix(mix(mix(seed) ^ a) ^ b.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

fn gaussian_chunk(seed: u64, component: usize, chunk: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, component as u64, chunk as u64));
    (0..CHUNK).map(|_| rng.sample(StandardNormal)).collect()
}

#[derive(Debug)]
struct GridPath {
    component: usize,
    cache: RwLock<Vec<f64>>,
}

impl GridPath {
    fn new(component: usize) -> Self {
        Self {
            component,
            cache: RwLock::new(Vec::new()),
        }
    }

    fn ensure(&self, len: usize, spec: &FieldSpec) {
        if self.cache.read().expect("field cache poisoned").len() >= len {
            return;
        }
        let mut values = self.cache.write().expect("field cache poisoned");
        let h = spec.grid_step;
        while values.len() < len {
            let chunk = values.len() / CHUNK;
            let draws = gaussian_chunk(spec.seed, self.component, chunk);
            for xi in draws {
                let next = match (&spec.components[self.component], values.last()) {
                    (FieldComponent::RandomWalk { .. }, None) => 0.0,
                    (FieldComponent::RandomWalk { diffusion }, Some(&prev)) => {
                        prev + (diffusion * h).sqrt() * xi
                    }
                    (FieldComponent::OrnsteinUhlenbeck { sigma, .. }, None) => sigma * xi,
                    (
                        FieldComponent::OrnsteinUhlenbeck {
                            sigma,
                            correlation_time,
                        },
                        Some(&prev),
                    ) => {
                        let a = (-h / correlation_time).exp();
                        a * prev + sigma * (1.0 - a * a).sqrt() * xi
                    }
                    _ => unreachable!("deterministic component on the stochastic grid"),
                };
                values.push(next);
            }
        }
    }

    fn at(&self, t: f64, spec: &FieldSpec) -> f64 {
        let x = t / spec.grid_step;
        let k = x.floor() as usize;
        self.ensure(k + 2, spec);
        let values = self.cache.read().expect("field cache poisoned");
        let frac = x - k as f64;
        values[k] + frac * (values[k + 1] - values[k])
    }
}

/// Deterministic replayable field `b(t) − b₀` along the NV axis, in gauss.
#[derive(Debug)]
pub struct FieldTrajectory {
    spec: FieldSpec,
    paths: Vec<Option<GridPath>>,
}

impl FieldTrajectory {
    pub fn new(spec: FieldSpec) -> Result<Self, EnvironmentError> {
        if !(spec.grid_step > 0.0 && spec.grid_step.is_finite()) {
            return Err(EnvironmentError::BadGrid(spec.grid_step));
        }
        for (i, c) in spec.components.iter().enumerate() {
            c.validate(i)?;
        }
        let paths = spec
            .components
            .iter()
            .enumerate()
            .map(|(i, c)| c.is_stochastic().then(|| GridPath::new(i)))
            .collect();
        Ok(Self { spec, paths })
    }

    pub fn quiet() -> Self {
        Self::new(FieldSpec::quiet()).expect("empty spec is valid")
    }

    pub fn spec(&self) -> &FieldSpec {
        &self.spec
    }

    /// Value of component `index` alone at time `t`.
    pub fn component_at(&self, index: usize, t: f64) -> f64 {
        debug_assert!(t >= 0.0, "field queried at negative time {t}");
        let t = t.max(0.0);
        match (&self.spec.components[index], &self.paths[index]) {
            (
                FieldComponent::Sinusoid {
                    amplitude_pp,
                    period,
                    phase,
                },
                _,
            ) => 0.5 * amplitude_pp * (2.0 * PI * t / period + phase).sin(),
            (FieldComponent::Constant { offset }, _) => *offset,
            (_, Some(path)) => path.at(t, &self.spec),
            (_, None) => unreachable!("stochastic component without a grid"),
        }
    }

    /// Total field deviation from the bias field at time `t`.
    pub fn field_at(&self, t: f64) -> f64 {
        (0..self.spec.components.len())
            .map(|i| self.component_at(i, t))
            .sum()
    }

    /// Samples the field on a uniform grid `t0, t0 + dt, ...` (n points).
    pub fn sample_grid(&self, t0: f64, dt: f64, n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .map(|i| {
                let t = t0 + dt * i as f64;
                (t, self.field_at(t))
            })
            .collect()
    }
}

/// Which kind of raw fluorescence sample is being read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    Ramsey,
    Esr,
}

fn default_photon_budget() -> f64 {
    FLUORESCENCE_RATE * READOUT_WINDOW
}

/// Additive readout noise on each raw sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Std dev of a single Ramsey readout sample.
    pub readout_sigma: f64,
    /// Std dev of a single ESR fluorescence sample; `None` uses `readout_sigma`.
    pub esr_sigma: Option<f64>,
    pub shot_noise_enabled: bool,
    pub photon_budget: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            readout_sigma: 0.0,
            esr_sigma: None,
            shot_noise_enabled: false,
            photon_budget: default_photon_budget(),
        }
    }
}

impl NoiseModel {
    pub fn off() -> Self {
        Self::default()
    }

    pub fn gaussian(readout_sigma: f64) -> Self {
        Self {
            readout_sigma,
            ..Self::default()
        }
    }

    /// Noise levels of the lab-calibrated presets: per-sequence Ramsey
    /// noise sized to the reported nuclear sensitivity, ESR noise sized for
    /// kHz-level four-point tracking per block.
    pub fn lab_calibrated() -> Self {
        Self {
            readout_sigma: 0.295,
            esr_sigma: Some(5e-3),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EnvironmentError> {
        if !(self.readout_sigma >= 0.0 && self.readout_sigma.is_finite()) {
            return Err(EnvironmentError::BadNoise {
                name: "readout_sigma",
                value: self.readout_sigma,
            });
        }
        if let Some(s) = self.esr_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(EnvironmentError::BadNoise {
                    name: "esr_sigma",
                    value: s,
                });
            }
        }
        if !(self.photon_budget > 0.0 && self.photon_budget.is_finite()) {
            return Err(EnvironmentError::BadNoise {
                name: "photon_budget",
                value: self.photon_budget,
            });
        }
        Ok(())
    }

    fn base_sigma(&self, kind: SampleKind) -> f64 {
        match kind {
            SampleKind::Ramsey => self.readout_sigma,
            SampleKind::Esr => self.esr_sigma.unwrap_or(self.readout_sigma),
        }
    }

    /// Total per-sample standard deviation at signal level `signal`.
    pub fn sigma_total(&self, signal: f64, kind: SampleKind) -> f64 {
        let base = self.base_sigma(kind);
        if self.shot_noise_enabled {
            (base * base + signal.max(0.0) / self.photon_budget).sqrt()
        } else {
            base
        }
    }

    pub fn is_silent(&self) -> bool {
        !self.shot_noise_enabled
            && self.readout_sigma == 0.0
            && self.esr_sigma.unwrap_or(0.0) == 0.0
    }
}

/// One noisy raw Ramsey sample. The result is not clipped to `[0, 1]`.
pub fn sample_readout<R: Rng + ?Sized>(true_signal: f64, noise: &NoiseModel, rng: &mut R) -> f64 {
    sample_readout_kind(true_signal, noise, SampleKind::Ramsey, rng)
}

pub fn sample_readout_kind<R: Rng + ?Sized>(
    true_signal: f64,
    noise: &NoiseModel,
    kind: SampleKind,
    rng: &mut R,
) -> f64 {
    let sigma = noise.sigma_total(true_signal, kind);
    if sigma == 0.0 {
        return true_signal;
    }
    let z: f64 = rng.sample(StandardNormal);
    true_signal + sigma * z
}

/// Mean of `n` independent noisy samples whose noiseless mean is
/// `mean_signal`, drawn in one step. The sum of independent Gaussians is
/// Gaussian, so this has the same distribution as averaging `n` draws of
/// [`sample_readout_kind`] when the signal is constant over the samples.
pub fn sample_mean<R: Rng + ?Sized>(
    mean_signal: f64,
    n: usize,
    noise: &NoiseModel,
    kind: SampleKind,
    rng: &mut R,
) -> f64 {
    let sigma = noise.sigma_total(mean_signal, kind) / (n.max(1) as f64).sqrt();
    if sigma == 0.0 {
        return mean_signal;
    }
    let z: f64 = rng.sample(StandardNormal);
    mean_signal + sigma * z
}
