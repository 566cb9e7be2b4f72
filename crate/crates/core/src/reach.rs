//! Empirical reach of the embedded manifold.
//!
//! For `x` on the grid,
//!
//! ```text
//! cot^2 theta_k(x) = sup_y |(I - P_x) h(y)|^2 / (1 - <h(x), h(y)>)^2
//! ```
//!
//! over grid points `y` farther than `diag_exclusion` from `x`; `theta_k` is
//! `arccot` of the square root of the largest local value. The same ratio is
//! also produced by the statistical decomposition
//!
//! ```text
//! k / |f(y)|^2 * (1 - C)^2 / (1 - C_k)^2 * (|f^x(y)|^2 - |P_x f^x(y)|^2) / k
//! ```
//!
//! where `f^x(y)` is the normalised regression residual of `f(y)` on
//! `(f(x), grad f(x))`. Because `(I - P_x) f^x(y) = (I - P_x) f(y) / (1 - C)`
//! the two agree exactly, which is the main internal consistency check.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddedCloud;
use crate::error::{Error, Result};
use crate::geometry::param_distance;
use crate::kernel::TrigKernel;
use crate::rng::{domain, substream};
use crate::sampler::{FieldBatch, KlBasis};

/// Default diagonal exclusion band in units of the grid spacing.
pub const DEFAULT_DIAG_FACTOR: f64 = 2.0;
/// Below this value the residual `1 - |U^T h|^2` is recomputed explicitly.
const RESIDUAL_RECOMPUTE: f64 = 1e-4;
const COINCIDENT_TOL: f64 = 1e-14;

/// Per-pair terms of the decomposition route.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// `k / |f(y)|^2`
    pub term1: f64,
    /// `(1 - C)^2 / (1 - C_k)^2`
    pub term2: f64,
    /// `|f^x(y)|^2 / k`
    pub term3: f64,
    /// `term1 * term2 * |P_x f^x(y)|^2 / k`
    pub error_term: f64,
    /// `term1 * term2 * term3 - error_term`
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachReport {
    pub local_cot2: Vec<f64>,
    pub argmax_index: Vec<usize>,
    /// Whether the maximiser of `x` lies in the first admissible ring.
    pub on_boundary: Vec<bool>,
    pub global_cot2: f64,
    /// Grid point attaining `global_cot2` (lowest index on ties).
    pub global_x: usize,
    pub theta_k: f64,
    pub diag_exclusion: f64,
    pub k: usize,
    /// Decomposition terms at `(x, argmax_index[x])`, when requested.
    pub decomposition: Option<Vec<Decomposition>>,
}

/// Result of the scan over `y` for a single `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalReach {
    pub cot2: f64,
    pub argmax: usize,
    pub on_boundary: bool,
}

/// `arccot(sqrt(cot2))` in `(0, pi/2]`.
pub fn theta_from_cot2(cot2: f64) -> f64 {
    1f64.atan2(cot2.max(0.0).sqrt())
}

fn check_exclusion(cloud: &EmbeddedCloud, diag_exclusion: f64) -> Result<()> {
    if !(diag_exclusion >= cloud.spacing() * (1.0 - 1e-12)) {
        return Err(Error::InvalidArgument(format!(
            "diag_exclusion {diag_exclusion} is below the grid spacing {}",
            cloud.spacing()
        )));
    }
    Ok(())
}

fn admissible(cloud: &EmbeddedCloud, x: usize, y: usize, diag_exclusion: f64) -> Option<f64> {
    let d = param_distance(&cloud.coords()[x], &cloud.coords()[y]);
    (d > diag_exclusion + 1e-9 * cloud.spacing()).then_some(d)
}

/// `|(I - P_x) h(y)|^2 / (1 - <h(x), h(y)>)^2` for one pair.
pub fn geometric_ratio(cloud: &EmbeddedCloud, x: usize, y: usize) -> Result<f64> {
    let u = cloud.checked_basis(x)?;
    let hy: DVector<f64> = cloud.h().row(y).transpose();
    let c = u.tr_mul(&hy);
    let mut num = 1.0 - c.norm_squared();
    if num < RESIDUAL_RECOMPUTE {
        num = (&hy - u * &c).norm_squared();
    }
    ratio(num, cloud.gram()[(x, y)], x, y)
}

fn ratio(num: f64, gram: f64, x: usize, y: usize) -> Result<f64> {
    let den = (1.0 - gram).powi(2);
    if den <= 0.0 {
        return Err(Error::Degenerate(format!("embedded points {x} and {y} coincide")));
    }
    Ok(num.max(0.0) / den)
}

/// Local `cot^2` at `x` and its maximiser over admissible `y`.
pub fn local_reach_geometric(cloud: &EmbeddedCloud, x_index: usize, diag_exclusion: f64) -> Result<(f64, usize)> {
    let r = local_reach(cloud, x_index, diag_exclusion)?;
    Ok((r.cot2, r.argmax))
}

pub fn local_reach(cloud: &EmbeddedCloud, x: usize, diag_exclusion: f64) -> Result<LocalReach> {
    check_exclusion(cloud, diag_exclusion)?;
    let u = cloud.checked_basis(x)?;
    let h = cloud.h();
    let proj = h * u;
    let mut best: Option<(f64, usize, f64)> = None;
    for y in 0..cloud.len() {
        let Some(dist) = admissible(cloud, x, y, diag_exclusion) else {
            continue;
        };
        let mut num = 1.0 - proj.row(y).norm_squared();
        if num < RESIDUAL_RECOMPUTE {
            let hy: DVector<f64> = h.row(y).transpose();
            num = (&hy - u * proj.row(y).transpose()).norm_squared();
        }
        let v = ratio(num, cloud.gram()[(x, y)], x, y)?;
        if best.is_none_or(|(b, _, _)| v > b) {
            best = Some((v, y, dist));
        }
    }
    let (cot2, argmax, dist) =
        best.ok_or_else(|| Error::NoAdmissiblePairs(format!("every point is within {diag_exclusion} of point {x}")))?;
    Ok(LocalReach {
        cot2,
        argmax,
        on_boundary: dist <= diag_exclusion + cloud.spacing() * (1.0 + 1e-9),
    })
}

/// Maximises the local ratio over all grid points.
pub fn global_reach(cloud: &EmbeddedCloud, diag_exclusion: f64) -> Result<ReachReport> {
    check_exclusion(cloud, diag_exclusion)?;
    let locals: Vec<LocalReach> = (0..cloud.len())
        .into_par_iter()
        .map(|x| local_reach(cloud, x, diag_exclusion))
        .collect::<Result<_>>()?;
    if locals.is_empty() {
        return Err(Error::NoAdmissiblePairs("empty cloud".into()));
    }
    let mut global_x = 0;
    for (i, l) in locals.iter().enumerate() {
        if l.cot2 > locals[global_x].cot2 {
            global_x = i;
        }
    }
    let global_cot2 = locals[global_x].cot2;
    Ok(ReachReport {
        local_cot2: locals.iter().map(|l| l.cot2).collect(),
        argmax_index: locals.iter().map(|l| l.argmax).collect(),
        on_boundary: locals.iter().map(|l| l.on_boundary).collect(),
        global_cot2,
        global_x,
        theta_k: theta_from_cot2(global_cot2),
        diag_exclusion,
        k: cloud.k(),
        decomposition: None,
    })
}

impl ReachReport {
    /// Fills the decomposition terms at every `(x, argmax(x))`.
    pub fn attach_decomposition(
        &mut self,
        batch: &FieldBatch,
        kernel: &TrigKernel,
        cloud: &EmbeddedCloud,
    ) -> Result<()> {
        let rows = (0..self.local_cot2.len())
            .into_par_iter()
            .map(|x| reach_decomposition(batch, kernel, cloud, x, self.argmax_index[x]))
            .collect::<Result<_>>()?;
        self.decomposition = Some(rows);
        Ok(())
    }

    /// Points whose maximiser sits in the first admissible ring.
    pub fn boundary_hits(&self) -> usize {
        self.on_boundary.iter().filter(|&&b| b).count()
    }

    /// CSV with columns `x_index,cot2_local,argmax_y,term1,term2,term3,error_term`.
    /// Decomposition columns are empty when not computed.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x_index,cot2_local,argmax_y,term1,term2,term3,error_term\n");
        for x in 0..self.local_cot2.len() {
            let _ = write!(out, "{x},{:e},{}", self.local_cot2[x], self.argmax_index[x]);
            match self.decomposition.as_ref().map(|d| d[x]) {
                Some(d) => {
                    let _ = writeln!(out, ",{:e},{:e},{:e},{:e}", d.term1, d.term2, d.term3, d.error_term);
                }
                None => out.push_str(",,,,\n"),
            }
        }
        out
    }
}

fn check_pair(batch: &FieldBatch, x: usize, y: usize) -> Result<()> {
    let n = batch.len();
    if x >= n || y >= n {
        return Err(Error::InvalidArgument("point index out of range".into()));
    }
    if x == y {
        return Err(Error::CoincidentPoints(format!("x = y = {x}; use the diagonal limit")));
    }
    Ok(())
}

/// Normalised regression residual from raw field data at `x` and `y`:
///
/// `(f(y) - C f(x) - sum_i X_i C * X_i f(x)) / (1 - C)` with the orthonormal
/// frame `X_i = lambda_i^{-1/2} d_i`.
///
/// `fx`, `fy` are `k`-vectors and `dfx[i]` the coordinate derivative `d_i f(x)`.
pub fn conditional_residual_from(
    kernel: &TrigKernel,
    x: &[f64],
    y: &[f64],
    fx: &DVector<f64>,
    dfx: &[DVector<f64>],
    fy: &DVector<f64>,
) -> Result<DVector<f64>> {
    let c = kernel.eval(x, y)?;
    if 1.0 - c <= COINCIDENT_TOL {
        return Err(Error::CoincidentPoints(format!("C(x, y) = {c}")));
    }
    let lambda = kernel.induced_metric_coeff();
    let mut r = fy - fx * c;
    for (i, dfi) in dfx.iter().enumerate() {
        let mut e = vec![0; x.len()];
        e[i] = 1;
        // X_i C * X_i f = lambda_i^{-1} d_i C * d_i f
        let dc = kernel.mixed_deriv(x, y, &e, &vec![0; x.len()])?;
        r -= dfi * (dc / lambda[i]);
    }
    Ok(r / (1.0 - c))
}

fn column(m: &DMatrix<f64>, row: usize) -> DVector<f64> {
    m.row(row).transpose()
}

/// The vector `f^{x,k}(y)` over all replicates.
pub fn conditional_residual_vector(
    batch: &FieldBatch,
    kernel: &TrigKernel,
    x: usize,
    y: usize,
) -> Result<DVector<f64>> {
    check_pair(batch, x, y)?;
    if !batch.has_d1() {
        return Err(Error::InvalidArgument(
            "conditional residual needs first derivatives".into(),
        ));
    }
    let pts = batch.grid().points();
    let dfx: Vec<DVector<f64>> = (0..batch.dim()).map(|d| column(batch.d1(d).unwrap(), x)).collect();
    conditional_residual_from(
        kernel,
        &pts[x],
        &pts[y],
        &column(batch.values(), x),
        &dfx,
        &column(batch.values(), y),
    )
}

/// Scalar `f_j^x(y)` for replicate `j`.
pub fn conditional_residual(batch: &FieldBatch, kernel: &TrigKernel, x: usize, y: usize, j: usize) -> Result<f64> {
    if j >= batch.k() {
        return Err(Error::InvalidArgument(format!("replicate {j} out of range")));
    }
    Ok(conditional_residual_vector(batch, kernel, x, y)?[j])
}

/// Diagonal limit `f(x) + Hess f(x)(X, X)` of `f^x(y)` as `y -> x` along the
/// unit direction `direction` (orthonormal-frame coordinates), all replicates.
pub fn diagonal_residual_limit_vector(
    batch: &FieldBatch,
    kernel: &TrigKernel,
    x: usize,
    direction: &[f64],
) -> Result<DVector<f64>> {
    let m = batch.dim();
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
    if !batch.has_d2() {
        return Err(Error::InvalidArgument("diagonal limit needs second derivatives".into()));
    }
    if x >= batch.len() {
        return Err(Error::InvalidArgument("point index out of range".into()));
    }
    let lambda = kernel.induced_metric_coeff();
    let mut out = column(batch.values(), x);
    for a in 0..m {
        for b in 0..m {
            let w = direction[a] * direction[b] / (lambda[a] * lambda[b]).sqrt();
            out += column(batch.d2(a, b).unwrap(), x) * w;
        }
    }
    Ok(out)
}

pub fn diagonal_residual_limit(
    batch: &FieldBatch,
    kernel: &TrigKernel,
    x: usize,
    direction: &[f64],
    j: usize,
) -> Result<f64> {
    if j >= batch.k() {
        return Err(Error::InvalidArgument(format!("replicate {j} out of range")));
    }
    Ok(diagonal_residual_limit_vector(batch, kernel, x, direction)?[j])
}

/// Decomposition terms for one pair.
pub fn reach_decomposition(
    batch: &FieldBatch,
    kernel: &TrigKernel,
    cloud: &EmbeddedCloud,
    x: usize,
    y: usize,
) -> Result<Decomposition> {
    let fxy = conditional_residual_vector(batch, kernel, x, y)?;
    let pts = batch.grid().points();
    let k = batch.k() as f64;
    let c = kernel.eval(&pts[x], &pts[y])?;
    let chat = cloud.gram()[(x, y)];
    if 1.0 - chat <= 0.0 {
        return Err(Error::Degenerate(format!(
            "sample correlation is one at distinct points {x}, {y}"
        )));
    }
    let fy_norm_sq = cloud.norms()[y].powi(2);
    let u = cloud.checked_basis(x)?;
    let proj = u.tr_mul(&fxy).norm_squared();
    let term1 = k / fy_norm_sq;
    let term2 = ((1.0 - c) / (1.0 - chat)).powi(2);
    let term3 = fxy.norm_squared() / k;
    let error_term = term1 * term2 * proj / k;
    Ok(Decomposition {
        term1,
        term2,
        term3,
        error_term,
        combined: term1 * term2 * term3 - error_term,
    })
}

/// Largest error term `E^{x,k}(y)` over all admissible grid pairs.
pub fn error_process_sup(
    batch: &FieldBatch,
    kernel: &TrigKernel,
    cloud: &EmbeddedCloud,
    diag_exclusion: f64,
) -> Result<f64> {
    check_exclusion(cloud, diag_exclusion)?;
    let sups: Vec<f64> = (0..cloud.len())
        .into_par_iter()
        .map(|x| {
            let mut best = 0.0f64;
            for y in 0..cloud.len() {
                if admissible(cloud, x, y, diag_exclusion).is_some() {
                    best = best.max(reach_decomposition(batch, kernel, cloud, x, y)?.error_term);
                }
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;
    Ok(sups.into_iter().fold(0.0, f64::max))
}

/// Refines the maximiser of the local ratio at `x` off the grid (circle
/// only) by golden-section search on `[y - spacing, y + spacing]`, evaluating
/// the sampled Karhunen-Loeve paths directly. Returns `(cot2, y_param)`; the
/// value never falls below the grid value.
pub fn refine_local_1d(
    kernel: &TrigKernel,
    batch: &FieldBatch,
    cloud: &EmbeddedCloud,
    x: usize,
    y: usize,
) -> Result<(f64, f64)> {
    if batch.dim() != 1 {
        return Err(Error::InvalidArgument(
            "refinement is implemented for the circle only".into(),
        ));
    }
    let coef = batch
        .coefficients()
        .ok_or_else(|| Error::InvalidArgument("refinement needs a Karhunen-Loeve batch".into()))?;
    let basis = KlBasis::new(kernel);
    let u = cloud.checked_basis(x)?;
    let hx: DVector<f64> = cloud.h().row(x).transpose();
    let eval = |t: f64| -> f64 {
        let f: DVector<f64> = basis.evaluate(coef, &[vec![t]], &[0]).row(0).transpose();
        let h = &f / f.norm();
        let c = u.tr_mul(&h);
        let num = (&h - u * &c).norm_squared();
        let den = (1.0 - hx.dot(&h)).powi(2);
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    };
    let y0 = batch.grid().point(y)[0];
    let grid_val = geometric_ratio(cloud, x, y)?;
    let (mut a, mut b) = (y0 - cloud.spacing(), y0 + cloud.spacing());
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut c, mut d) = (b - g * (b - a), a + g * (b - a));
    let (mut fc, mut fd) = (eval(c), eval(d));
    for _ in 0..80 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = eval(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = eval(d);
        }
    }
    let t = 0.5 * (a + b);
    let v = eval(t);
    Ok(if v > grid_val { (v, t) } else { (grid_val, y0) })
}

/// Objective evaluations spent polishing each of the best directions.
pub const ORACLE_POLISH_EVALS: usize = 400;

/// Definition-level reach at `x`: walks geodesics `cos r h(x) + sin r eta`
/// for random unit normals `eta` (orthogonal to `span(L_x)`) and returns the
/// smallest `r` at which some admissible `y` is at least as close to the
/// geodesic point as `x`, capped at `pi/2`.
///
/// The walk advances in steps of `r_step`; a crossing is then located by
/// bisection inside the last step. The best directions are polished by a
/// shrinking random search.
pub fn brute_force_reach_oracle(
    cloud: &EmbeddedCloud,
    x_index: usize,
    n_directions: usize,
    r_step: f64,
    diag_exclusion: f64,
    seed: u64,
) -> Result<f64> {
    if n_directions < 32 {
        return Err(Error::InvalidArgument("oracle needs at least 32 directions".into()));
    }
    if !(r_step > 0.0 && r_step < FRAC_PI_2) {
        return Err(Error::InvalidArgument(format!("invalid r_step {r_step}")));
    }
    check_exclusion(cloud, diag_exclusion)?;
    let ys: Vec<usize> = (0..cloud.len())
        .filter(|&y| admissible(cloud, x_index, y, diag_exclusion).is_some())
        .collect();
    if ys.is_empty() {
        return Err(Error::NoAdmissiblePairs(format!(
            "no admissible partner for point {x_index}"
        )));
    }
    let u = cloud.checked_basis(x_index)?;
    let k = cloud.k();
    if u.ncols() >= k {
        return Ok(FRAC_PI_2);
    }
    let hx: DVector<f64> = cloud.h().row(x_index).transpose();
    let hys: Vec<DVector<f64>> = ys.iter().map(|&y| cloud.h().row(y).transpose()).collect();
    let normal = |v: DVector<f64>| -> Option<DVector<f64>> {
        let r = &v - u * u.tr_mul(&v);
        let n = r.norm();
        (n > 1e-12).then(|| r / n)
    };
    // First r at which x stops being the nearest point of the geodesic.
    let first_hit = |eta: &DVector<f64>| -> f64 {
        let cs: Vec<(f64, f64)> = hys.iter().map(|hy| (hx.dot(hy), eta.dot(hy))).collect();
        let eta_x = eta.dot(&hx);
        let violated = |r: f64| {
            let (s, c) = r.sin_cos();
            let own = c + s * eta_x;
            cs.iter().any(|&(cy, ay)| c * cy + s * ay >= own)
        };
        let steps = (FRAC_PI_2 / r_step).ceil() as usize;
        let mut prev = 0.0;
        for i in 1..=steps {
            let r = (i as f64 * r_step).min(FRAC_PI_2);
            if violated(r) {
                let (mut lo, mut hi) = (prev, r);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if violated(mid) {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                return hi;
            }
            prev = r;
        }
        FRAC_PI_2
    };
    let mut rng = substream(seed, domain::ORACLE, x_index as u64);
    let gauss = |rng: &mut rand_chacha::ChaCha8Rng| DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut scored: Vec<(f64, DVector<f64>)> = Vec::with_capacity(n_directions);
    while scored.len() < n_directions {
        if let Some(eta) = normal(gauss(&mut rng)) {
            scored.push((first_hit(&eta), eta));
        }
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = scored[0].0;
    for (mut r0, mut eta) in scored.into_iter().take(8) {
        let mut scale = 0.5;
        let mut budget = ORACLE_POLISH_EVALS;
        while scale > 1e-4 && budget > 0 {
            let mut improved = false;
            for _ in 0..16 {
                budget = budget.saturating_sub(1);
                if let Some(cand) = normal(&eta + gauss(&mut rng) * scale) {
                    let r = first_hit(&cand);
                    if r < r0 {
                        r0 = r;
                        eta = cand;
                        improved = true;
                    }
                }
            }
            if !improved {
                scale *= 0.5;
            }
        }
        best = best.min(r0);
    }
    Ok(best)
}
