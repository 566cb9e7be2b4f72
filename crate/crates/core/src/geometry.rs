//! Flat base manifolds: the unit circle `S^1` and the flat torus `T^2`,
//! parameterised by angles in `[0, 2pi)`.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible number of grid points per coordinate.
pub const MIN_POINTS_PER_DIM: usize = 4;

/// Uniform tensor grid on the circle (`dim = 1`) or the flat torus (`dim = 2`).
///
/// Points are stored in lexicographic order of their integer indices, so the
/// last coordinate varies fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldGrid {
    dim: usize,
    n_per_dim: usize,
    spacing: f64,
    points: Vec<Vec<f64>>,
}

impl ManifoldGrid {
    pub fn uniform(dim: usize, n_per_dim: usize) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::InvalidArgument(format!(
                "manifold dimension must be 1 or 2, got {dim}"
            )));
        }
        if n_per_dim < MIN_POINTS_PER_DIM {
            return Err(Error::InvalidArgument(format!(
                "need at least {MIN_POINTS_PER_DIM} points per dimension, got {n_per_dim}"
            )));
        }
        let spacing = TAU / n_per_dim as f64;
        let coord = |i: usize| i as f64 * spacing;
        let points = match dim {
            1 => (0..n_per_dim).map(|i| vec![coord(i)]).collect(),
            _ => (0..n_per_dim)
                .flat_map(|i| (0..n_per_dim).map(move |j| vec![coord(i), coord(j)]))
                .collect(),
        };
        Ok(Self {
            dim,
            n_per_dim,
            spacing,
            points,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_per_dim(&self) -> usize {
        self.n_per_dim
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &[f64] {
        &self.points[index]
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    /// Per-coordinate angles used along one axis, `i * spacing`.
    pub fn axis(&self) -> Vec<f64> {
        (0..self.n_per_dim).map(|i| i as f64 * self.spacing).collect()
    }

    /// Index of the grid point nearest to `point` (coordinates taken modulo `2pi`).
    pub fn nearest_index(&self, point: &[f64]) -> Result<usize> {
        if point.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: point.len(),
            });
        }
        let idx = |c: f64| ((c.rem_euclid(TAU) / self.spacing).round() as usize) % self.n_per_dim;
        Ok(match self.dim {
            1 => idx(point[0]),
            _ => idx(point[0]) * self.n_per_dim + idx(point[1]),
        })
    }
}

/// Reduces `a` modulo `2pi` into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Per-coordinate parameter lag `x - y`, each entry reduced into `(-pi, pi]`.
pub fn wrap_distance(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok(x.iter().zip(y).map(|(a, b)| wrap_angle(a - b)).collect())
}

/// Euclidean length of the wrapped lag between two parameter points.
pub fn param_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| wrap_angle(a - b).powi(2))
        .sum::<f64>()
        .sqrt()
}
