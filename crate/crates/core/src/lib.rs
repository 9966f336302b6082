//! Gaussian process morphable models.
//!
//! A shape or deformation prior is written as a Gaussian process `GP(mu, k)` over
//! deformation fields `u: R^3 -> R^3`. The covariance `k` is assembled from a small
//! algebra of matrix-valued kernels ([`kernels`]), approximated by its leading
//! Karhunen-Loeve terms using the Nystrom method and a randomized eigensolver
//! ([`lowrank`]), and fitted to surfaces or images by minimizing a regularized energy
//! over the expansion coefficients ([`registration`]).
//!
//! Supporting modules provide closed-form GP regression ([`regression`]), the
//! closed-form spectrum of the 1D Gaussian kernel used as a ground-truth oracle
//! ([`analytic`]), discrete point-distribution models and the usual model-quality
//! metrics ([`shapemodel`]), and the geometry carriers everything operates on
//! ([`geometry`]).

// Parameter checks are written as `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod kernels;
pub mod linalg;
pub mod lowrank;
pub mod registration;
pub mod regression;
pub mod shapemodel;

pub use error::{Error, Result};
pub use geometry::{Point, Vector};
