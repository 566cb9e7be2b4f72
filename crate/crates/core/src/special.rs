//! Special functions behind the exact mean of the zero-centred sample
//! correlation: the log-gamma function, the Gamma ratio
//! `Gamma((k+1)/2)^2 / (Gamma(k/2) Gamma((k+2)/2))` and the Gauss
//! hypergeometric series `2F1(a, b; c; z)` for `|z| < 1`.

use std::f64::consts::PI;

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
#[allow(clippy::excessive_precision)]
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Gamma(x)` for `x > 0` (Lanczos, g = 7), with the reflection formula
/// below one half.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS_COEF[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Below this `k` the Gamma ratio is taken from [`ln_gamma`]; above it from
/// the asymptotic series in `1/a`, `a = k/2`.
const RATIO_SERIES_FROM: u64 = 20;

/// `Gamma((k+1)/2)^2 / (Gamma(k/2) Gamma((k+2)/2))`, accurate to about
/// `1e-14` relative for every `k >= 1` up to well beyond `1e6`.
pub fn correlation_gamma_ratio(k: u64) -> f64 {
    let kf = k as f64;
    if k < RATIO_SERIES_FROM {
        return (2.0 * ln_gamma((kf + 1.0) / 2.0) - ln_gamma(kf / 2.0) - ln_gamma((kf + 2.0) / 2.0)).exp();
    }
    // ln r = -1/(4a) + 1/(96a^3) - 1/(320a^5) + 17/(7168a^7) - 31/(9216a^9)
    //        + 691/(90112a^11) - 5461/(212992a^13) + ...
    let t = 2.0 / kf;
    let t2 = t * t;
    const C: [f64; 7] = [
        -1.0 / 4.0,
        1.0 / 96.0,
        -1.0 / 320.0,
        17.0 / 7168.0,
        -31.0 / 9216.0,
        691.0 / 90112.0,
        -5461.0 / 212992.0,
    ];
    let poly = C.iter().rev().fold(0.0, |acc, c| acc * t2 + c);
    (t * poly).exp()
}

/// Gauss hypergeometric series `2F1(a, b; c; z)` for `|z| < 1`, summed until
/// the relative term size drops below `1e-15`.
pub fn hyp2f1(a: f64, b: f64, c: f64, z: f64) -> Result<f64> {
    if !(z.abs() < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "hypergeometric series needs |z| < 1, got {z}"
        )));
    }
    if c <= 0.0 && c.fract() == 0.0 {
        return Err(Error::InvalidArgument("c must not be a non-positive integer".into()));
    }
    let mut term = 1.0;
    let mut sum = 1.0;
    for n in 0..1_000_000u32 {
        let nf = n as f64;
        term *= (a + nf) * (b + nf) / ((c + nf) * (nf + 1.0)) * z;
        sum += term;
        if term.abs() < 1e-15 * sum.abs() {
            return Ok(sum);
        }
    }
    Err(Error::Numerical(format!("2F1 series did not converge at z = {z}")))
}
