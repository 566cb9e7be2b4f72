//! Stationary unit-variance covariance kernels given by finite trigonometric
//! series, with exact derivatives of every order.
//!
//! On the circle the kernel is `C(u) = sum_j a_j cos(j u)` in the lag
//! `u = x - y`; on the torus it is the product of one such profile per
//! coordinate. Non-negative weights make every such kernel positive
//! semi-definite, and the weights summing to one gives unit variance.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_distance, ManifoldGrid};

/// Unit-variance tolerance on the sum of spectral weights.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;
/// Minimum eigenvalue required of the joint `(f, grad f, hess f)` covariance.
pub const NONDEGENERACY_TOL: f64 = 1e-8;
/// Largest derivative order supported by [`TrigKernel::kernel_derivs`].
pub const MAX_DERIV_ORDER: usize = 6;

/// One `(frequency, weight)` pair of a per-dimension spectral list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralTerm {
    pub freq: u32,
    pub weight: f64,
}

/// Kernel description as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub dims: Vec<Vec<SpectralTerm>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelSpec", into = "KernelSpec")]
pub struct TrigKernel {
    dims: Vec<Vec<SpectralTerm>>,
}

impl TryFrom<KernelSpec> for TrigKernel {
    type Error = Error;

    fn try_from(spec: KernelSpec) -> Result<Self> {
        TrigKernel::new(spec.dims)
    }
}

impl From<TrigKernel> for KernelSpec {
    fn from(k: TrigKernel) -> Self {
        KernelSpec { dims: k.dims }
    }
}

/// `d^n/du^n cos(j u)`.
fn cos_deriv(j: f64, n: usize, u: f64) -> f64 {
    let jn = j.powi(n as i32);
    let (s, c) = (j * u).sin_cos();
    match n % 4 {
        0 => jn * c,
        1 => -jn * s,
        2 => -jn * c,
        _ => jn * s,
    }
}

impl TrigKernel {
    pub fn new(dims: Vec<Vec<SpectralTerm>>) -> Result<Self> {
        if !(1..=2).contains(&dims.len()) {
            return Err(Error::InvalidKernel(format!(
                "kernel must have 1 or 2 dimensions, got {}",
                dims.len()
            )));
        }
        for (d, terms) in dims.iter().enumerate() {
            if terms.is_empty() {
                return Err(Error::InvalidKernel(format!("dimension {d} has no terms")));
            }
            for t in terms {
                if t.freq == 0 {
                    return Err(Error::InvalidKernel(format!(
                        "dimension {d}: frequencies must be positive"
                    )));
                }
                if !(t.weight >= 0.0) || !t.weight.is_finite() {
                    return Err(Error::InvalidKernel(format!(
                        "dimension {d}: weight {} is not a finite non-negative number",
                        t.weight
                    )));
                }
            }
            let total: f64 = terms.iter().map(|t| t.weight).sum();
            if (total - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(Error::InvalidKernel(format!(
                    "dimension {d}: weights sum to {total}, not 1"
                )));
            }
        }
        Ok(Self { dims })
    }

    /// One-dimensional kernel from `(frequency, weight)` pairs.
    pub fn circle(terms: &[(u32, f64)]) -> Result<Self> {
        Self::new(vec![terms
            .iter()
            .map(|&(freq, weight)| SpectralTerm { freq, weight })
            .collect()])
    }

    /// Product kernel on the torus.
    pub fn torus(first: &[(u32, f64)], second: &[(u32, f64)]) -> Result<Self> {
        let conv = |ts: &[(u32, f64)]| {
            ts.iter()
                .map(|&(freq, weight)| SpectralTerm { freq, weight })
                .collect::<Vec<_>>()
        };
        Self::new(vec![conv(first), conv(second)])
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn terms(&self, dim: usize) -> &[SpectralTerm] {
        &self.dims[dim]
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: n,
            });
        }
        Ok(())
    }

    /// `n`-th derivative of the per-dimension profile `c_d(u)`.
    pub fn profile_deriv(&self, dim: usize, order: usize, u: f64) -> f64 {
        self.dims[dim]
            .iter()
            .map(|t| t.weight * cos_deriv(t.freq as f64, order, u))
            .sum()
    }

    /// Spectral moment `sum_j a_j j^p` of one dimension.
    pub fn spectral_moment(&self, dim: usize, p: i32) -> f64 {
        self.dims[dim].iter().map(|t| t.weight * (t.freq as f64).powi(p)).sum()
    }

    /// `C` at a lag vector. Lags need not be wrapped.
    pub fn eval_lag(&self, lag: &[f64]) -> f64 {
        lag.iter()
            .enumerate()
            .map(|(d, &u)| self.profile_deriv(d, 0, u))
            .product()
    }

    /// Mixed lag derivative `prod_d c_d^{(orders_d)}(lag_d)`.
    pub fn lag_deriv(&self, lag: &[f64], orders: &[usize]) -> f64 {
        lag.iter()
            .zip(orders)
            .enumerate()
            .map(|(d, (&u, &n))| self.profile_deriv(d, n, u))
            .product()
    }

    /// `d^alpha/dx^alpha d^beta/dy^beta C(x, y)` at a given lag `x - y`.
    pub fn mixed_deriv_lag(&self, lag: &[f64], alpha: &[usize], beta: &[usize]) -> f64 {
        let orders: Vec<usize> = alpha.iter().zip(beta).map(|(a, b)| a + b).collect();
        let sign = if beta.iter().sum::<usize>() % 2 == 0 { 1.0 } else { -1.0 };
        sign * self.lag_deriv(lag, &orders)
    }

    /// `d^alpha/dx^alpha d^beta/dy^beta C(x, y)`.
    pub fn mixed_deriv(&self, x: &[f64], y: &[f64], alpha: &[usize], beta: &[usize]) -> Result<f64> {
        self.check_dim(x.len())?;
        let lag = wrap_distance(x, y)?;
        Ok(self.mixed_deriv_lag(&lag, alpha, beta))
    }

    /// Correlation `C(x, y)`; exactly one on the diagonal.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        if x == y {
            return Ok(1.0);
        }
        let lag = wrap_distance(x, y)?;
        Ok(self.eval_lag(&lag).clamp(-1.0, 1.0))
    }

    /// Table of all lag derivatives of total order `<= max_order`.
    pub fn kernel_derivs(&self, x: &[f64], y: &[f64], max_order: usize) -> Result<DerivTable> {
        if max_order > MAX_DERIV_ORDER {
            return Err(Error::InvalidArgument(format!(
                "derivative order {max_order} exceeds {MAX_DERIV_ORDER}"
            )));
        }
        self.check_dim(x.len())?;
        let lag = wrap_distance(x, y)?;
        let mut entries = BTreeMap::new();
        for idx in multi_indices(self.dim(), max_order) {
            let v = if idx.iter().all(|&o| o == 0) {
                self.eval(x, y)?
            } else {
                self.lag_deriv(&lag, &idx)
            };
            entries.insert(idx, v);
        }
        Ok(DerivTable {
            max_order,
            lag,
            entries,
        })
    }

    /// Induced metric coefficient `lambda_d = sum_j a_j j^2` per dimension.
    ///
    /// The metric is diagonal for product kernels, so `lambda_d^{-1/2} d/du_d`
    /// is an orthonormal frame.
    pub fn induced_metric_coeff(&self) -> Vec<f64> {
        (0..self.dim()).map(|d| self.spectral_moment(d, 2)).collect()
    }

    /// Covariance matrix of `(f, d_i f, d_ij f (i <= j))` at a single point,
    /// in coordinate derivatives.
    pub fn joint_point_covariance(&self) -> DMatrix<f64> {
        let idx = point_jet_indices(self.dim());
        let zero = vec![0.0; self.dim()];
        DMatrix::from_fn(idx.len(), idx.len(), |a, b| {
            self.mixed_deriv_lag(&zero, &idx[a], &idx[b])
        })
    }

    /// Numerical checks of validity and non-degeneracy. Failures are reported
    /// in the returned value, never raised.
    pub fn validate(&self, grid: &ManifoldGrid) -> Result<ValidationReport> {
        self.check_dim(grid.dim())?;
        let mut max_var_dev = 0.0f64;
        for p in grid.points() {
            let lag0 = vec![0.0; self.dim()];
            max_var_dev = max_var_dev.max((self.eval_lag(&lag0) - 1.0).abs());
            max_var_dev = max_var_dev.max((self.eval(p, p)? - 1.0).abs());
        }
        let n = grid.len();
        let pts = grid.points();
        let cov = DMatrix::from_fn(n, n, |i, j| {
            let lag = wrap_distance(&pts[i], &pts[j]).expect("same grid");
            self.eval_lag(&lag)
        });
        let psd_min_eigenvalue = min_eigenvalue(cov);
        let joint_min_eigenvalue = min_eigenvalue(self.joint_point_covariance());
        let spectral_ok = self.dims.iter().all(|terms| {
            let mut freqs: Vec<u32> = terms.iter().filter(|t| t.weight > 0.0).map(|t| t.freq).collect();
            freqs.sort_unstable();
            freqs.dedup();
            freqs.len() >= 2
        });
        Ok(ValidationReport {
            unit_variance: max_var_dev <= WEIGHT_SUM_TOL,
            max_variance_deviation: max_var_dev,
            psd_min_eigenvalue,
            psd_ok: psd_min_eigenvalue >= -NONDEGENERACY_TOL,
            joint_min_eigenvalue,
            nondegenerate: spectral_ok && joint_min_eigenvalue > NONDEGENERACY_TOL,
        })
    }

    /// Whether the `(f, grad f, hess f)` covariance is numerically non-singular.
    pub fn is_nondegenerate(&self) -> bool {
        let spectral_ok = self
            .dims
            .iter()
            .all(|terms| terms.iter().filter(|t| t.weight > 0.0).count() >= 2);
        spectral_ok && min_eigenvalue(self.joint_point_covariance()) > NONDEGENERACY_TOL
    }
}

fn min_eigenvalue(m: DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// All multi-indices in `dim` variables with total order `<= max_order`,
/// graded then lexicographic.
pub fn multi_indices(dim: usize, max_order: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for total in 0..=max_order {
        match dim {
            1 => out.push(vec![total]),
            _ => {
                for a in (0..=total).rev() {
                    out.push(vec![a, total - a]);
                }
            }
        }
    }
    out
}

/// Multi-indices for `(f, d_i f, d_ij f with i <= j)`.
pub fn point_jet_indices(dim: usize) -> Vec<Vec<usize>> {
    let unit = |i: usize| {
        let mut v = vec![0; dim];
        v[i] += 1;
        v
    };
    let mut out = vec![vec![0; dim]];
    for i in 0..dim {
        out.push(unit(i));
    }
    for i in 0..dim {
        for j in i..dim {
            let mut v = unit(i);
            v[j] += 1;
            out.push(v);
        }
    }
    out
}

/// Lag derivatives of a kernel at one pair of points.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivTable {
    pub max_order: usize,
    pub lag: Vec<f64>,
    entries: BTreeMap<Vec<usize>, f64>,
}

impl DerivTable {
    /// Derivative for the given per-coordinate orders, if within the table.
    pub fn get(&self, orders: &[usize]) -> Option<f64> {
        self.entries.get(orders).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[usize], f64)> {
        self.entries.iter().map(|(k, v)| (k.as_slice(), *v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub unit_variance: bool,
    pub max_variance_deviation: f64,
    pub psd_min_eigenvalue: f64,
    pub psd_ok: bool,
    pub joint_min_eigenvalue: f64,
    pub nondegenerate: bool,
}
