use std::f64::consts::PI;

use dualspin::environment::{
    sample_readout, FieldComponent, FieldSpec, FieldTrajectory, NoiseModel,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[test]
fn random_walk_variance_grows_linearly() {
    let diffusion = 2.5e-3;
    let values: Vec<f64> = (0..10_000u64)
        .map(|seed| {
            let spec = FieldSpec::quiet()
                .with_component(FieldComponent::RandomWalk { diffusion })
                .with_seed(seed);
            FieldTrajectory::new(spec).unwrap().field_at(100.0)
        })
        .collect();
    let var = values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64;
    let expected = diffusion * 100.0;
    assert!(
        (var / expected - 1.0).abs() < 0.1,
        "variance {var}, expected {expected}"
    );
}

#[test]
fn ornstein_uhlenbeck_is_stationary_with_configured_sigma() {
    let sigma = 0.04;
    let values: Vec<f64> = (0..4_000u64)
        .map(|seed| {
            let spec = FieldSpec::quiet()
                .with_component(FieldComponent::OrnsteinUhlenbeck {
                    sigma,
                    correlation_time: 50.0,
                })
                .with_seed(seed);
            FieldTrajectory::new(spec).unwrap().field_at(37.5)
        })
        .collect();
    let s = std_dev(&values);
    assert!((s / sigma - 1.0).abs() < 0.05, "std {s}");
}

#[test]
fn gaussian_readout_noise_has_configured_std() {
    let noise = NoiseModel::gaussian(0.01);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xs: Vec<f64> = (0..100_000)
        .map(|_| sample_readout(0.5, &noise, &mut rng))
        .collect();
    let s = std_dev(&xs);
    assert!((s / 0.01 - 1.0).abs() < 0.01, "std {s}");
}

#[test]
fn shot_noise_matches_poisson_counting() {
    let budget = 400.0;
    let signal = 0.7;
    let noise = NoiseModel {
        shot_noise_enabled: true,
        photon_budget: budget,
        ..NoiseModel::off()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model: Vec<f64> = (0..100_000)
        .map(|_| sample_readout(signal, &noise, &mut rng))
        .collect();
    let poisson = Poisson::new(signal * budget).unwrap();
    let counted: Vec<f64> = (0..100_000)
        .map(|_| poisson.sample(&mut rng) / budget)
        .collect();
    let analytic = (signal / budget).sqrt();
    let (m, p) = (std_dev(&model), std_dev(&counted));
    assert!(
        (m / analytic - 1.0).abs() < 0.02,
        "model std {m}, analytic {analytic}"
    );
    assert!(
        (p / analytic - 1.0).abs() < 0.02,
        "poisson std {p}, analytic {analytic}"
    );
}

#[test]
fn sinusoid_spectrum_has_one_dominant_bin() {
    let period = 1000.0;
    let traj = FieldTrajectory::new(FieldSpec::quiet().with_component(FieldComponent::Sinusoid {
        amplitude_pp: 0.14,
        period,
        phase: 0.3,
    }))
    .unwrap();
    let n = 4000;
    let dt = 1.0; // four full periods
    let xs: Vec<f64> = (0..n).map(|k| traj.field_at(k as f64 * dt)).collect();
    let power: Vec<f64> = (0..n / 2)
        .map(|j| {
            let (mut re, mut im) = (0.0, 0.0);
            for (k, x) in xs.iter().enumerate() {
                let w = 2.0 * PI * (j * k) as f64 / n as f64;
                re += x * w.cos();
                im -= x * w.sin();
            }
            re * re + im * im
        })
        .collect();
    let peak = (0..power.len())
        .max_by(|&a, &b| power[a].total_cmp(&power[b]))
        .unwrap();
    assert_eq!(peak, 4);
    let rest = power
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != peak)
        .map(|(_, p)| *p)
        .fold(0.0, f64::max);
    assert!(rest < 1e-12 * power[peak]);
}

fn composite(seed: u64) -> (FieldSpec, Vec<FieldComponent>) {
    let parts = vec![
        FieldComponent::Sinusoid {
            amplitude_pp: 0.14,
            period: 1000.0,
            phase: 0.0,
        },
        FieldComponent::RandomWalk { diffusion: 1e-4 },
        FieldComponent::OrnsteinUhlenbeck {
            sigma: 0.04,
            correlation_time: 1e4,
        },
        FieldComponent::Constant { offset: 0.2 },
    ];
    let spec = parts
        .iter()
        .cloned()
        .fold(FieldSpec::quiet(), |s, c| s.with_component(c))
        .with_seed(seed);
    (spec, parts)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn evaluation_order_does_not_matter(seed in any::<u64>(), mut times in prop::collection::vec(0.0f64..5e4, 1..40)) {
        let (spec, _) = composite(seed);
        let a = FieldTrajectory::new(spec.clone()).unwrap();
        let forward: Vec<u64> = times.iter().map(|&t| a.field_at(t).to_bits()).collect();
        let b = FieldTrajectory::new(spec).unwrap();
        times.reverse();
        let mut backward: Vec<u64> = times.iter().map(|&t| b.field_at(t).to_bits()).collect();
        backward.reverse();
        prop_assert_eq!(forward, backward);
    }

    #[test]
    fn composite_is_sum_of_components(seed in any::<u64>(), t in 0.0f64..5e4) {
        let (spec, parts) = composite(seed);
        let whole = FieldTrajectory::new(spec).unwrap();
        let sum: f64 = (0..parts.len()).map(|i| whole.component_at(i, t)).sum();
        prop_assert!((whole.field_at(t) - sum).abs() <= 1e-15 * (1.0 + sum.abs()));
    }
}
