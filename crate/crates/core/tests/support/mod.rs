//! Numerical oracles shared by the integration tests and the acceptance
//! suite.
#![allow(dead_code)]

use std::f64::consts::PI;

/// Integrates the rotating-frame two-level Schrödinger equation
/// `i ċ = H c`, `H = π(Δ σz + Ω σx)` (Hz units), with classical RK4 and
/// returns the excited-state population after a square π pulse.
pub fn rk4_transfer(rabi: f64, detuning: f64, steps: usize) -> f64 {
    type C = (f64, f64);
    let mul_i = |(re, im): C, k: f64| -> C { (k * im, -k * re) }; // −i·k·z
    let deriv = |c: [C; 2]| -> [C; 2] {
        let w = PI * detuning;
        let r = PI * rabi;
        let a = (w * c[0].0 + r * c[1].0, w * c[0].1 + r * c[1].1);
        let b = (r * c[0].0 - w * c[1].0, r * c[0].1 - w * c[1].1);
        [mul_i(a, 1.0), mul_i(b, 1.0)]
    };
    let add = |c: [C; 2], d: [C; 2], h: f64| -> [C; 2] {
        [
            (c[0].0 + h * d[0].0, c[0].1 + h * d[0].1),
            (c[1].0 + h * d[1].0, c[1].1 + h * d[1].1),
        ]
    };
    let t_end = 0.5 / rabi;
    let h = t_end / steps as f64;
    let mut c: [C; 2] = [(1.0, 0.0), (0.0, 0.0)];
    for _ in 0..steps {
        let k1 = deriv(c);
        let k2 = deriv(add(c, k1, h / 2.0));
        let k3 = deriv(add(c, k2, h / 2.0));
        let k4 = deriv(add(c, k3, h));
        for i in 0..2 {
            c[i].0 += h / 6.0 * (k1[i].0 + 2.0 * k2[i].0 + 2.0 * k3[i].0 + k4[i].0);
            c[i].1 += h / 6.0 * (k1[i].1 + 2.0 * k2[i].1 + 2.0 * k3[i].1 + k4[i].1);
        }
    }
    c[1].0 * c[1].0 + c[1].1 * c[1].1
}

/// Shift of the line against the bias of the raw secant intersection,
/// from 50-digit bisection on the difference of the two secants.
pub const BIAS_FIXTURE: [(f64, f64); 21] = [
    (-500000.0, -544002.204219417),
    (-450000.0, -320525.5199387661),
    (-400000.0, -226304.4635438225),
    (-350000.0, -177789.9451839547),
    (-300000.0, -147882.87051686677),
    (-250000.0, -125036.96288113318),
    (-200000.0, -103629.2971037586),
    (-150000.0, -80920.10230675193),
    (-100000.0, -55889.55115933485),
    (-50000.0, -28676.403874761654),
    (0.0, -187.16580899351086),
    (50000.0, 28278.2184760769),
    (100000.0, 55418.1763874718),
    (150000.0, 80320.35492246362),
    (200000.0, 102832.7094148895),
    (250000.0, 123947.4486101363),
    (300000.0, 146347.40620477914),
    (350000.0, 175532.45262763053),
    (400000.0, 222752.5475753022),
    (450000.0, 314243.0577827255),
    (500000.0, 530010.6685451509),
];
