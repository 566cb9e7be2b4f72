//! Closed-form side: the conditional variance `V^{xy}`, the reach constant
//! `sigma_c^2`, moments of the sample correlation, the covariances of the
//! limiting fluctuation processes and the homology sample budget.
//!
//! Throughout, `X_i = lambda_i^{-1/2} d_i` is the orthonormal frame of the
//! induced metric and
//!
//! ```text
//! f^x(y) = (f(y) - C f(x) - sum_i X_i C * X_i f(x)) / (1 - C),   C = C(x, y)
//! V^{xy} = Var f^x(y) = (1 - C^2 - sum_i (X_i C)^2) / (1 - C)^2
//! ```
//!
//! The fluctuation limit of `sqrt(k) (R_k - V)` is
//! `gamma = beta - V eta + 2 V (1 + C) zeta`, where `eta`, `beta` and `zeta`
//! are the limits of the scaled errors of `|f(y)|^2 / k`, `|f^x(y)|^2 / k`
//! and the sample correlation (divided by `1 - C^2`).

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_distance, ManifoldGrid};
use crate::kernel::TrigKernel;
use crate::special::{correlation_gamma_ratio, hyp2f1};

/// Variances in `[NEGATIVE_ERROR, 0)` are round-off and clamped to zero;
/// anything more negative signals a formula error.
pub const NEGATIVE_ERROR: f64 = -1e-9;
/// Pairs with `1 - C` below this are treated as coincident.
const COINCIDENT_TOL: f64 = 1e-12;
/// Direction samples per half turn when maximising the torus diagonal limit.
const DIRECTION_SAMPLES: usize = 720;

/// Linear functional `sum c * d^alpha f(p)` of the field.
#[derive(Debug, Clone, PartialEq)]
pub struct Functional(pub Vec<(Vec<f64>, Vec<usize>, f64)>);

impl Functional {
    pub fn value(p: &[f64]) -> Self {
        Self(vec![(p.to_vec(), vec![0; p.len()], 1.0)])
    }

    /// Covariance of two functionals under `kernel`.
    pub fn cov(&self, other: &Self, kernel: &TrigKernel) -> Result<f64> {
        let mut s = 0.0;
        for (p, a, c) in &self.0 {
            for (q, b, d) in &other.0 {
                s += c * d * kernel.mixed_deriv(p, q, a, b)?;
            }
        }
        Ok(s)
    }
}

/// `f^x(y)` as a functional.
pub fn conditional_functional(kernel: &TrigKernel, x: &[f64], y: &[f64]) -> Result<Functional> {
    let c = checked_corr(kernel, x, y)?;
    let m = x.len();
    let lambda = kernel.induced_metric_coeff();
    let zero = vec![0; m];
    let s = 1.0 / (1.0 - c);
    let mut terms = vec![(y.to_vec(), zero.clone(), s), (x.to_vec(), zero.clone(), -c * s)];
    for i in 0..m {
        let mut e = zero.clone();
        e[i] = 1;
        let dc = kernel.mixed_deriv(x, y, &e, &zero)?;
        terms.push((x.to_vec(), e, -dc / lambda[i] * s));
    }
    Ok(Functional(terms))
}

fn checked_corr(kernel: &TrigKernel, x: &[f64], y: &[f64]) -> Result<f64> {
    let c = kernel.eval(x, y)?;
    if 1.0 - c <= COINCIDENT_TOL {
        return Err(Error::CoincidentPoints(format!("C(x, y) = {c}")));
    }
    Ok(c)
}

fn clamp_nonneg(v: f64, what: &str) -> Result<f64> {
    if v >= 0.0 {
        Ok(v)
    } else if v >= NEGATIVE_ERROR {
        Ok(0.0)
    } else {
        Err(Error::Numerical(format!("{what} is negative: {v}")))
    }
}

/// `V^{xy}` from the lag alone (stationary kernels).
pub fn conditional_variance_lag(kernel: &TrigKernel, lag: &[f64]) -> Result<f64> {
    let c = kernel.eval_lag(lag);
    if 1.0 - c <= COINCIDENT_TOL {
        return Err(Error::CoincidentPoints(format!("C = {c} at lag {lag:?}")));
    }
    let lambda = kernel.induced_metric_coeff();
    let zero = vec![0; lag.len()];
    let mut num = 1.0 - c * c;
    for i in 0..lag.len() {
        let mut e = zero.clone();
        e[i] = 1;
        num -= kernel.mixed_deriv_lag(lag, &e, &zero).powi(2) / lambda[i];
    }
    clamp_nonneg(num / (1.0 - c).powi(2), "conditional variance")
}

/// `V^{xy} = (1 - C^2 - sum_i (X_i C)^2) / (1 - C)^2`.
pub fn conditional_variance(kernel: &TrigKernel, x: &[f64], y: &[f64]) -> Result<f64> {
    checked_corr(kernel, x, y)?;
    conditional_variance_lag(kernel, &wrap_distance(x, y)?)
}

/// Limit of `V^{xy}` as `y -> x` along the unit `direction` (orthonormal
/// frame coordinates): `Var(Hess f(X, X)) - 1`. On the circle this is
/// `mu / lambda^2 - 1` with `mu` the fourth spectral moment.
pub fn conditional_variance_diagonal_limit(kernel: &TrigKernel, direction: &[f64]) -> Result<f64> {
    let m = kernel.dim();
    if direction.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: direction.len(),
        });
    }
    let norm = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument("direction must be a unit vector".into()));
    }
    let lambda = kernel.induced_metric_coeff();
    let zero = vec![0.0; m];
    let mut hess = Vec::new();
    for a in 0..m {
        for b in 0..m {
            let mut alpha = vec![0; m];
            alpha[a] += 1;
            alpha[b] += 1;
            hess.push((alpha, direction[a] * direction[b] / (lambda[a] * lambda[b]).sqrt()));
        }
    }
    let mut var = 0.0;
    for (a, wa) in &hess {
        for (b, wb) in &hess {
            var += wa * wb * kernel.mixed_deriv_lag(&zero, a, b);
        }
    }
    clamp_nonneg(var - 1.0, "diagonal limit")
}

/// Largest diagonal limit over directions and the maximising direction.
pub fn diagonal_limit_sup(kernel: &TrigKernel) -> Result<(f64, Vec<f64>)> {
    if kernel.dim() == 1 {
        return Ok((conditional_variance_diagonal_limit(kernel, &[1.0])?, vec![1.0]));
    }
    let eval = |phi: f64| conditional_variance_diagonal_limit(kernel, &[phi.cos(), phi.sin()]);
    let mut best = (f64::MIN, 0.0);
    for i in 0..DIRECTION_SAMPLES {
        let phi = PI * i as f64 / DIRECTION_SAMPLES as f64;
        let v = eval(phi)?;
        if v > best.0 {
            best = (v, phi);
        }
    }
    let h = PI / DIRECTION_SAMPLES as f64;
    let (v, phi) = golden_max(|p| eval(p).unwrap_or(f64::MIN), best.1 - h, best.1 + h);
    let (v, phi) = if v > best.0 { (v, phi) } else { best };
    Ok((v, vec![phi.cos(), phi.sin()]))
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut c, mut d) = (b - g * (b - a), a + g * (b - a));
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-12 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let t = 0.5 * (a + b);
    (f(t), t)
}

/// `sigma_c^2` on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryProfile {
    /// `V^{x_i x_j}` with the directional diagonal supremum on the diagonal.
    #[serde(skip)]
    pub v: DMatrix<f64>,
    pub sigma_c_local: Vec<f64>,
    /// Maximising lag `x - y` per point; all zeros when the diagonal wins.
    pub argmax_lag: Vec<Vec<f64>>,
    pub sigma_c_global: f64,
    pub global_x: usize,
    pub diagonal_limit: f64,
    pub refined: bool,
}

impl TheoryProfile {
    /// CSV with columns `x_index,sigma_c_local,argmax_lag_0[,argmax_lag_1]`.
    pub fn to_csv(&self) -> String {
        let m = self.argmax_lag.first().map_or(1, Vec::len);
        let mut out = String::from("x_index,sigma_c_local");
        for d in 0..m {
            let _ = write!(out, ",argmax_lag_{d}");
        }
        out.push('\n');
        for (i, s) in self.sigma_c_local.iter().enumerate() {
            let _ = write!(out, "{i},{s:e}");
            for l in &self.argmax_lag[i] {
                let _ = write!(out, ",{l:e}");
            }
            out.push('\n');
        }
        out
    }
}

/// Grid supremum of `V^{x.}` for every grid point, with the diagonal limit
/// injected analytically and an optional golden-section refinement of each
/// maximiser along every lag coordinate.
pub fn sigma_c(kernel: &TrigKernel, grid: &ManifoldGrid, refine: bool) -> Result<TheoryProfile> {
    if kernel.dim() != grid.dim() {
        return Err(Error::DimensionMismatch {
            expected: kernel.dim(),
            got: grid.dim(),
        });
    }
    let (diag, _) = diagonal_limit_sup(kernel)?;
    let n = grid.len();
    let pts = grid.points();
    let rows: Vec<(Vec<f64>, f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|x| -> Result<_> {
            let mut row = vec![diag; n];
            let mut best = (diag, vec![0.0; grid.dim()]);
            for y in 0..n {
                if y == x {
                    continue;
                }
                let lag = wrap_distance(&pts[x], &pts[y])?;
                if 1.0 - kernel.eval_lag(&lag) <= COINCIDENT_TOL {
                    continue;
                }
                let v = conditional_variance_lag(kernel, &lag)?;
                row[y] = v;
                if v > best.0 {
                    best = (v, lag);
                }
            }
            if refine && best.1.iter().any(|l| *l != 0.0) {
                best = refine_lag(kernel, best, grid.spacing());
            }
            Ok((row, best.0, best.1))
        })
        .collect::<Result<_>>()?;
    let v = DMatrix::from_fn(n, n, |i, j| rows[i].0[j]);
    let sigma_c_local: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let mut global_x = 0;
    for (i, s) in sigma_c_local.iter().enumerate() {
        if *s > sigma_c_local[global_x] {
            global_x = i;
        }
    }
    Ok(TheoryProfile {
        v,
        sigma_c_global: sigma_c_local[global_x],
        sigma_c_local,
        argmax_lag: rows.into_iter().map(|r| r.2).collect(),
        global_x,
        diagonal_limit: diag,
        refined: refine,
    })
}

fn refine_lag(kernel: &TrigKernel, start: (f64, Vec<f64>), spacing: f64) -> (f64, Vec<f64>) {
    let (mut best, mut lag) = start;
    for _ in 0..3 {
        for d in 0..lag.len() {
            let eval = |t: f64| {
                let mut l = lag.clone();
                l[d] = t;
                conditional_variance_lag(kernel, &l).unwrap_or(f64::MIN)
            };
            let (v, t) = golden_max(eval, lag[d] - spacing, lag[d] + spacing);
            if v > best {
                best = v;
                lag[d] = t;
            }
        }
    }
    (best, lag)
}

/// Leading-order bias `-rho (1 - rho^2) / (2 (k + 1))` of the sample correlation.
pub fn chat_bias(rho: f64, k: u64) -> Result<f64> {
    check_rho_k(rho, k)?;
    Ok(-rho * (1.0 - rho * rho) / (2.0 * (k as f64 + 1.0)))
}

/// Leading-order variance `(1 - rho^2)^2 / k`.
pub fn chat_variance(rho: f64, k: u64) -> Result<f64> {
    check_rho_k(rho, k)?;
    Ok((1.0 - rho * rho).powi(2) / k as f64)
}

/// Exact mean `rho * r(k) * 2F1(1/2, 1/2; (k+2)/2; rho^2)` with
/// `r(k) = Gamma((k+1)/2)^2 / (Gamma(k/2) Gamma((k+2)/2))`; exactly `rho`
/// when `|rho| = 1`.
pub fn chat_exact_mean(rho: f64, k: u64) -> Result<f64> {
    check_rho_k(rho, k)?;
    if rho.abs() == 1.0 {
        return Ok(rho);
    }
    if rho == 0.0 {
        return Ok(0.0);
    }
    let f = hyp2f1(0.5, 0.5, (k as f64 + 2.0) / 2.0, rho * rho)?;
    Ok(rho * correlation_gamma_ratio(k) * f)
}

fn check_rho_k(rho: f64, k: u64) -> Result<()> {
    if !(rho.abs() <= 1.0) {
        return Err(Error::InvalidArgument(format!("|rho| must not exceed 1, got {rho}")));
    }
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMoments {
    pub rho: f64,
    pub k: u64,
    pub bias: f64,
    pub variance: f64,
    pub exact_mean: f64,
}

pub fn correlation_moments(rho: f64, k: u64) -> Result<CorrelationMoments> {
    Ok(CorrelationMoments {
        rho,
        k,
        bias: chat_bias(rho, k)?,
        variance: chat_variance(rho, k)?,
        exact_mean: chat_exact_mean(rho, k)?,
    })
}

/// Covariances of the limiting processes `eta`, `beta`, `zeta` and `gamma`.
///
/// Cross-covariances are taken between the first process at the first
/// argument set and the second process at the second.
#[derive(Debug, Clone)]
pub struct FluctuationModel {
    kernel: TrigKernel,
}

impl FluctuationModel {
    pub fn new(kernel: TrigKernel) -> Self {
        Self { kernel }
    }

    pub fn kernel(&self) -> &TrigKernel {
        &self.kernel
    }

    fn c(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        self.kernel.eval(a, b)
    }

    /// Limit covariance of `sqrt(k) (C_k - C)` at two pairs.
    pub fn cov_zeta_tilde(&self, x1: &[f64], y1: &[f64], x2: &[f64], y2: &[f64]) -> Result<f64> {
        checked_corr(&self.kernel, x1, y1)?;
        checked_corr(&self.kernel, x2, y2)?;
        let c = |a: &[f64], b: &[f64]| self.c(a, b);
        let (c11, c22) = (c(x1, y1)?, c(x2, y2)?);
        let (cy1x2, cy1y2, cx1x2, cx1y2) = (c(y1, x2)?, c(y1, y2)?, c(x1, x2)?, c(x1, y2)?);
        Ok(
            0.5 * c11 * c22 * (cy1x2.powi(2) + cy1y2.powi(2) + cx1x2.powi(2) + cx1y2.powi(2))
                + cy1x2 * (cx1y2 - cx1x2 * c22)
                + cy1y2 * (cx1x2 - cx1y2 * c22)
                - c11 * (cx1x2 * cx1y2 + cy1y2 * cy1x2),
        )
    }

    /// `E{zeta(x1,y1) zeta(x2,y2)}`, one on coincident pairs.
    pub fn cov_zeta(&self, x1: &[f64], y1: &[f64], x2: &[f64], y2: &[f64]) -> Result<f64> {
        let (c1, c2) = (self.c(x1, y1)?, self.c(x2, y2)?);
        Ok(self.cov_zeta_tilde(x1, y1, x2, y2)? / ((1.0 - c1 * c1) * (1.0 - c2 * c2)))
    }

    /// `E{eta(y1) eta(y2)} = 2 C(y1, y2)^2`.
    pub fn cov_eta(&self, y1: &[f64], y2: &[f64]) -> Result<f64> {
        Ok(2.0 * self.c(y1, y2)?.powi(2))
    }

    /// `E{f^{x1}(y1) f^{x2}(y2)}`.
    pub fn conditional_cross_cov(&self, x1: &[f64], y1: &[f64], x2: &[f64], y2: &[f64]) -> Result<f64> {
        let a = conditional_functional(&self.kernel, x1, y1)?;
        let b = conditional_functional(&self.kernel, x2, y2)?;
        a.cov(&b, &self.kernel)
    }

    /// `E{beta(x1,y1) beta(x2,y2)} = 2 (E{f^{x1}(y1) f^{x2}(y2)})^2`.
    pub fn cov_beta(&self, x1: &[f64], y1: &[f64], x2: &[f64], y2: &[f64]) -> Result<f64> {
        Ok(2.0 * self.conditional_cross_cov(x1, y1, x2, y2)?.powi(2))
    }

    /// `E{eta(y1) beta(x2,y2)} = 2 Cov(f(y1), f^{x2}(y2))^2`.
    pub fn cross_eta_beta(&self, y1: &[f64], x2: &[f64], y2: &[f64]) -> Result<f64> {
        let w = conditional_functional(&self.kernel, x2, y2)?;
        Ok(2.0 * Functional::value(y1).cov(&w, &self.kernel)?.powi(2))
    }

    /// `E{eta(y1) zeta(x2,y2)}`.
    pub fn cross_eta_zeta(&self, y1: &[f64], x2: &[f64], y2: &[f64]) -> Result<f64> {
        let c = checked_corr(&self.kernel, x2, y2)?;
        let (a, b) = (self.c(x2, y1)?, self.c(y1, y2)?);
        Ok((2.0 * a * b - c * (a * a + b * b)) / (1.0 - c * c))
    }

    /// `E{zeta(x1,y1) beta(x2,y2)}`.
    pub fn cross_zeta_beta(&self, x1: &[f64], y1: &[f64], x2: &[f64], y2: &[f64]) -> Result<f64> {
        let c = checked_corr(&self.kernel, x1, y1)?;
        let w = conditional_functional(&self.kernel, x2, y2)?;
        let a = Functional::value(y1).cov(&w, &self.kernel)?;
        let b = Functional::value(x1).cov(&w, &self.kernel)?;
        Ok((2.0 * a * b - c * (a * a + b * b)) / (1.0 - c * c))
    }

    /// Variance of `gamma(x,y) = beta - V eta(y) + 2 V (1 + C) zeta`.
    pub fn var_gamma(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let c = checked_corr(&self.kernel, x, y)?;
        let v = conditional_variance(&self.kernel, x, y)?;
        let s = 2.0 * v * (1.0 + c);
        let total = self.cov_beta(x, y, x, y)? + v * v * self.cov_eta(y, y)? + s * s * self.cov_zeta(x, y, x, y)?
            - 2.0 * v * self.cross_eta_beta(y, x, y)?
            + 2.0 * s * self.cross_zeta_beta(x, y, x, y)?
            - 2.0 * v * s * self.cross_eta_zeta(y, x, y)?;
        if total < NEGATIVE_ERROR {
            return Err(Error::Numerical(format!("var_gamma is negative: {total}")));
        }
        Ok(total.max(0.0))
    }
}

/// Sample budget for recovering the homology of the manifold from a union of
/// balls around `n` uniform samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomologyBudget {
    pub m: u32,
    pub vol: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub omega_m: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub n_required: u64,
}

/// Volume of the unit ball in `R^m`.
pub fn unit_ball_volume(m: u32) -> f64 {
    // omega_m = 2 pi / m * omega_{m-2}
    let mut w = if m.is_multiple_of(2) { 1.0 } else { 2.0 };
    let mut d = if m.is_multiple_of(2) { 2 } else { 3 };
    while d <= m {
        w *= 2.0 * PI / d as f64;
        d += 2;
    }
    w
}

pub fn homology_budget(m: u32, vol: f64, tau: f64, epsilon: f64, delta: f64) -> Result<HomologyBudget> {
    if m == 0 || !(vol > 0.0) || !(tau > 0.0) {
        return Err(Error::InvalidArgument("m, vol and tau must be positive".into()));
    }
    if !(epsilon > 0.0 && epsilon < tau / 2.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must lie in (0, tau/2), got {epsilon}"
        )));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidArgument(format!("delta must lie in (0, 1], got {delta}")));
    }
    let omega_m = unit_ball_volume(m);
    let gamma1 = (epsilon / (8.0 * tau)).asin();
    let gamma2 = (epsilon / (16.0 * tau)).asin();
    let mf = m as i32;
    let beta1 = 4f64.powi(mf) * vol / (omega_m * (epsilon * gamma1.cos()).powi(mf));
    let beta2 = 8f64.powi(mf) * vol / (omega_m * (epsilon * gamma2.cos()).powi(mf));
    let n = beta1 * (beta2.ln() + (1.0 / delta).ln());
    Ok(HomologyBudget {
        m,
        vol,
        tau,
        epsilon,
        delta,
        omega_m,
        gamma1,
        gamma2,
        beta1,
        beta2,
        n_required: n.ceil().max(1.0) as u64,
    })
}
