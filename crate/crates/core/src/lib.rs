//! Reach of self-normalised Gaussian embeddings of flat compact manifolds.
//!
//! A unit-variance stationary Gaussian field `f` on the circle or flat torus is
//! sampled `k` times and the point `x` is mapped to `f^k(x) / |f^k(x)|` on the
//! unit sphere of `R^k`. As `k` grows, `cot^2` of the reach of the image
//! converges to the constant `sigma_c^2(f)` of the field. This crate computes
//! the empirical reach by two independent routes, evaluates the closed-form
//! limit and fluctuation covariances, and runs seeded Monte Carlo studies that
//! confront the two sides.
//!
//! Module map:
//!
//! * [`geometry`]: circle / torus grids and wrapped parameter lags.
//! * [`kernel`]: finite trigonometric covariance kernels and their derivatives.
//! * [`sampler`]: exact Karhunen-Loeve and Cholesky field samplers.
//! * [`embedding`]: the normalised embedding, frame matrices and projections.
//! * [`reach`]: empirical local/global reach, decomposition and brute-force oracle.
//! * [`theory`]: conditional variances, `sigma_c^2`, estimator moments,
//!   fluctuation covariances and the homology sample budget.
//! * [`experiments`]: configurable Monte Carlo studies and their reports.

// `!(x > 0.0)` style comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod embedding;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod kernel;
pub mod reach;
pub mod rng;
pub mod sampler;
pub mod special;
pub mod stats;
pub mod theory;

pub use embedding::{embed, sample_correlation, EmbedOptions, EmbeddedCloud};
pub use error::{Error, Result};
pub use geometry::{wrap_distance, ManifoldGrid};
pub use kernel::{SpectralTerm, TrigKernel};
pub use reach::{global_reach, local_reach_geometric, ReachReport};
pub use sampler::{sample_cholesky, sample_kl, FieldBatch, SampleMethod};
