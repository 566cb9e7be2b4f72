//! The normalised embedding `h^k(x) = f^k(x) / |f^k(x)|`, the frame matrices
//! `L_x = [f^k(x) | d_1 f^k(x) | ... | d_m f^k(x)]` and projections onto their
//! span.
//!
//! Projections go through an orthonormal basis of `span(L_x)` obtained from a
//! thin SVD, dropping singular values below `1e-10` times the largest one, so
//! `P_x` is never formed and rank-deficient frames still have a well defined
//! span.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sampler::FieldBatch;

/// Relative singular-value cutoff for the span of `L_x`.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedOptions {
    /// Accept frames whose numerical rank is below `m + 1`.
    pub rank_tolerant: bool,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self { rank_tolerant: true }
    }
}

/// Embedded point cloud with frames, bases and Gram matrix.
#[derive(Debug, Clone)]
pub struct EmbeddedCloud {
    coords: Vec<Vec<f64>>,
    spacing: f64,
    h: DMatrix<f64>,
    norms: Vec<f64>,
    frames: Vec<DMatrix<f64>>,
    bases: Vec<DMatrix<f64>>,
    ranks: Vec<usize>,
    gram: DMatrix<f64>,
    options: EmbedOptions,
}

/// Embeds a sampled batch. Requires first derivatives and `k >= m + 1`.
pub fn embed(batch: &FieldBatch) -> Result<EmbeddedCloud> {
    embed_with(batch, EmbedOptions::default())
}

pub fn embed_with(batch: &FieldBatch, options: EmbedOptions) -> Result<EmbeddedCloud> {
    let m = batch.dim();
    if !batch.has_d1() {
        return Err(Error::InvalidArgument("embedding needs first derivatives".into()));
    }
    if batch.k() < m + 1 {
        return Err(Error::InvalidArgument(format!(
            "k = {} is below m + 1 = {}",
            batch.k(),
            m + 1
        )));
    }
    let values = batch.values().transpose();
    let frames = (0..batch.len())
        .map(|i| {
            let mut l = DMatrix::zeros(batch.k(), m + 1);
            l.set_column(0, &values.column(i));
            for d in 0..m {
                l.set_column(d + 1, &batch.d1(d).unwrap().row(i).transpose());
            }
            l
        })
        .collect();
    EmbeddedCloud::from_parts(
        batch.grid().points().to_vec(),
        batch.grid().spacing(),
        values,
        frames,
        options,
    )
}

impl EmbeddedCloud {
    /// Builds a cloud from raw parts: `values` is `k x N` (column `i` is
    /// `f^k(x_i)`) and `frames[i]` is `k x (m+1)` with first column
    /// proportional to `f^k(x_i)`.
    pub fn from_parts(
        coords: Vec<Vec<f64>>,
        spacing: f64,
        values: DMatrix<f64>,
        frames: Vec<DMatrix<f64>>,
        options: EmbedOptions,
    ) -> Result<Self> {
        let (k, n) = values.shape();
        if coords.len() != n || frames.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: coords.len().min(frames.len()),
            });
        }
        if frames.iter().any(|l| l.nrows() != k) {
            return Err(Error::InvalidArgument("frame rows must equal k".into()));
        }
        let norms: Vec<f64> = values.column_iter().map(|c| c.norm()).collect();
        if let Some(i) = norms.iter().position(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(Error::Degenerate(format!("zero or non-finite field norm at point {i}")));
        }
        let mut h = values.transpose();
        for (i, mut row) in h.row_iter_mut().enumerate() {
            row /= norms[i];
        }
        let (bases, ranks): (Vec<_>, Vec<_>) = frames.par_iter().map(span_basis).unzip();
        let mut cloud = Self {
            coords,
            spacing,
            gram: DMatrix::zeros(0, 0),
            h,
            norms,
            frames,
            bases,
            ranks,
            options,
        };
        cloud.gram = cloud.compute_gram();
        Ok(cloud)
    }

    fn compute_gram(&self) -> DMatrix<f64> {
        let mut g = &self.h * self.h.transpose();
        let n = g.nrows();
        for i in 0..n {
            g[(i, i)] = 1.0;
            for j in 0..i {
                let v = (0.5 * (g[(i, j)] + g[(j, i)])).clamp(-1.0, 1.0);
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    }

    /// Replaces every frame by `L_x * mix`, e.g. to change from coordinate to
    /// orthonormal derivative columns.
    pub fn with_frames(&self, mix: impl Fn(usize) -> DMatrix<f64>) -> Result<Self> {
        let frames: Vec<DMatrix<f64>> = self.frames.iter().enumerate().map(|(i, l)| l * mix(i)).collect();
        let mut out = self.clone();
        let (bases, ranks): (Vec<_>, Vec<_>) = frames.par_iter().map(span_basis).unzip();
        out.frames = frames;
        out.bases = bases;
        out.ranks = ranks;
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.h.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.h.nrows() == 0
    }

    pub fn k(&self) -> usize {
        self.h.ncols()
    }

    pub fn coords(&self) -> &[Vec<f64>] {
        &self.coords
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// `N x k`, row `i` is `h^k(x_i)`.
    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn frame(&self, i: usize) -> &DMatrix<f64> {
        &self.frames[i]
    }

    /// Orthonormal basis (`k x rank`) of `span(L_x)`.
    pub fn basis(&self, i: usize) -> &DMatrix<f64> {
        &self.bases[i]
    }

    pub fn rank(&self, i: usize) -> usize {
        self.ranks[i]
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn options(&self) -> EmbedOptions {
        self.options
    }

    pub(crate) fn checked_basis(&self, i: usize) -> Result<&DMatrix<f64>> {
        if i >= self.len() {
            return Err(Error::InvalidArgument(format!("point index {i} out of range")));
        }
        let cols = self.frames[i].ncols();
        if !self.options.rank_tolerant && self.ranks[i] < cols {
            return Err(Error::RankDeficient {
                index: i,
                rank: self.ranks[i],
                cols,
            });
        }
        Ok(&self.bases[i])
    }

    /// `(v - P_x v, |P_x v|^2)`.
    pub fn project_residual(&self, x_index: usize, v: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        if v.len() != self.k() {
            return Err(Error::DimensionMismatch {
                expected: self.k(),
                got: v.len(),
            });
        }
        let u = self.checked_basis(x_index)?;
        let c = u.tr_mul(v);
        Ok((v - u * &c, c.norm_squared()))
    }
}

fn span_basis(l: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let svd = l.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&j| smax > 0.0 && svd.singular_values[j] > RANK_TOL * smax)
        .collect();
    let basis = DMatrix::from_fn(l.nrows(), keep.len(), |r, c| u[(r, keep[c])]);
    (basis, keep.len())
}

/// Zero-centred sample correlation of the field at two grid points.
pub fn sample_correlation(batch: &FieldBatch, x_index: usize, y_index: usize) -> Result<f64> {
    let n = batch.len();
    if x_index >= n || y_index >= n {
        return Err(Error::InvalidArgument("point index out of range".into()));
    }
    let v = batch.values();
    let (x, y) = (v.row(x_index), v.row(y_index));
    correlation(x.iter().copied(), y.iter().copied())
}

/// `sum a_j b_j / sqrt(sum a_j^2 sum b_j^2)`; exactly one when `a == b`.
pub fn correlation(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> Result<f64> {
    let (mut ab, mut aa, mut bb, mut same) = (0.0, 0.0, 0.0, true);
    for (x, y) in a.zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
        same &= x == y;
    }
    if !(aa > 0.0 && bb > 0.0) {
        return Err(Error::Degenerate("zero denominator in sample correlation".into()));
    }
    if same {
        return Ok(1.0);
    }
    Ok((ab / aa.sqrt() / bb.sqrt()).clamp(-1.0, 1.0))
}
