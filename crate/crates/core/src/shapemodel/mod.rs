//! Discrete point-distribution models.
//!
//! A [`DiscreteModel`] is the classical statistical shape model: a mean displacement and
//! a basis over `N` fixed reference points, with vectors stacked point-major as
//! `(x_1, y_1, z_1, x_2, ...)`. Discretizing a low-rank GP at a point set gives one, and
//! PCA of example deformations gives one; with the sample-covariance kernel the two
//! coincide.

pub mod io;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::geometry::{symmetric_surface_distance, Point, TriangleMesh, Vector};
use crate::kernels::{shared_reference, DeformationField};
use crate::linalg::{symmetric_eigen, EigenPairs};
use crate::lowrank::{LowRankGp, EIGENVALUE_CUTOFF};
use crate::{Error, Result};

/// Surface samples per one-sided distance in the quality metrics.
pub const DISTANCE_SAMPLES: usize = 1000;

/// Default number of random instances for [`specificity`].
pub const SPECIFICITY_SAMPLES: usize = 1000;

/// `instance(alpha) = mean + basis * alpha`, displacements at `points`.
///
/// `variances[i]` is the squared norm of basis column `i`, the variance of the model
/// along that column's direction.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    points: Vec<Point>,
    mean: DVector<f64>,
    basis: DMatrix<f64>,
    variances: Vec<f64>,
}

impl DiscreteModel {
    pub fn new(points: Vec<Point>, mean: DVector<f64>, basis: DMatrix<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("a discrete model needs at least one point"));
        }
        let n3 = points.len() * 3;
        if mean.len() != n3 || basis.nrows() != n3 {
            return Err(Error::DimensionMismatch(format!(
                "{} points need a mean of length {n3} and {n3} basis rows, got {} and {}",
                points.len(),
                mean.len(),
                basis.nrows()
            )));
        }
        let variances = basis.column_iter().map(|c| c.norm_squared()).collect();
        Ok(DiscreteModel {
            points,
            mean,
            basis,
            variances,
        })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// Model covariance `basis * basis^T`.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }

    /// Stacked displacements for coefficients `alpha`.
    pub fn instance(&self, alpha: &DVector<f64>) -> Result<DVector<f64>> {
        if alpha.len() != self.rank() {
            return Err(Error::DimensionMismatch(format!(
                "{} coefficients given for a rank-{} model",
                alpha.len(),
                self.rank()
            )));
        }
        Ok(&self.mean + &self.basis * alpha)
    }

    pub fn displacements(&self, alpha: &DVector<f64>) -> Result<Vec<Vector>> {
        let v = self.instance(alpha)?;
        Ok((0..self.points.len()).map(|j| Vector::new(v[3 * j], v[3 * j + 1], v[3 * j + 2])).collect())
    }

    /// The reference mesh moved by the instance; its vertices must be the model points.
    pub fn instance_mesh(&self, reference: &TriangleMesh, alpha: &DVector<f64>) -> Result<TriangleMesh> {
        if reference.vertices().len() != self.points.len() {
            return Err(Error::DimensionMismatch(format!(
                "mesh has {} vertices, the model {} points",
                reference.vertices().len(),
                self.points.len()
            )));
        }
        reference.displaced(&self.displacements(alpha)?)
    }

    /// Standard-normal coefficients, deterministic for a fixed seed.
    pub fn sample_coefficients(&self, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DVector::from_fn(self.rank(), |_, _| StandardNormal.sample(&mut rng))
    }
}

/// The model's mean and basis at `points`. `instance(alpha)` then equals the GP's
/// deformation with coefficients `alpha` at those points.
pub fn discretize(gp: &LowRankGp, points: &[Point]) -> Result<DiscreteModel> {
    if points.is_empty() {
        return Err(Error::invalid("cannot discretize at an empty point set"));
    }
    let (means, basis) = gp.mean_and_basis(points);
    let mean = DVector::from_iterator(points.len() * 3, means.iter().flat_map(|m| [m.x, m.y, m.z]));
    DiscreteModel::new(points.to_vec(), mean, basis)
}

/// PCA of example deformations on a shared reference.
///
/// With `X` the `3N x n` matrix of centred examples scaled by `1/sqrt(n-1)`, the
/// nonzero eigenpairs of the sample covariance `X X^T` follow from the small Gram
/// matrix `X^T X = V D V^T`: the basis is `X V`, whose columns have squared norms `D`.
/// At most `n - 1` components survive.
pub fn build_pca(fields: &[DeformationField]) -> Result<DiscreteModel> {
    if fields.len() < 2 {
        return Err(Error::invalid("PCA needs at least 2 example deformations"));
    }
    let points = shared_reference(fields)?;
    let n = fields.len();
    let np = points.len();
    let mean = DVector::from_fn(np * 3, |row, _| {
        fields.iter().map(|f| f.vectors[row / 3][row % 3]).sum::<f64>() / n as f64
    });
    let scale = 1.0 / ((n - 1) as f64).sqrt();
    let x = DMatrix::from_fn(np * 3, n, |row, i| (fields[i].vectors[row / 3][row % 3] - mean[row]) * scale);
    let gram = x.transpose() * &x;
    let eig = symmetric_eigen(gram);
    let top = eig.values.first().copied().unwrap_or(0.0);
    let kept = eig.values.iter().take_while(|&&d| top > 0.0 && d > EIGENVALUE_CUTOFF * top).count();
    let eig = eig.truncate(kept);
    let mut pairs = EigenPairs {
        values: eig.values,
        vectors: &x * eig.vectors,
    };
    pairs.canonicalize_signs();
    DiscreteModel::new(points, mean, pairs.vectors)
}

/// Accumulated variance of the first `m` components.
pub fn compactness(model: &DiscreteModel, m: usize) -> f64 {
    model.variances().iter().take(m).sum()
}

/// Mean over `n_samples` random instances of the symmetric mean surface distance to the
/// closest training mesh. `reference` supplies the triangles, its vertices being the
/// model points.
pub fn specificity(
    model: &DiscreteModel,
    reference: &TriangleMesh,
    training: &[TriangleMesh],
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if training.is_empty() {
        return Err(Error::invalid("specificity needs at least one training mesh"));
    }
    if n_samples == 0 {
        return Err(Error::invalid("specificity needs at least one sample"));
    }
    let distances: Vec<f64> = (0..n_samples as u64)
        .into_par_iter()
        .map(|k| {
            let alpha = model.sample_coefficients(seed.wrapping_add(k));
            let instance = model.instance_mesh(reference, &alpha)?;
            training
                .iter()
                .map(|t| symmetric_surface_distance(&instance, t, DISTANCE_SAMPLES, seed).map(|d| d.mean))
                .try_fold(f64::INFINITY, |best, d| d.map(|d| best.min(d)))
        })
        .collect::<Result<_>>()?;
    Ok(distances.iter().sum::<f64>() / n_samples as f64)
}

/// Mean symmetric surface distance between each held-out mesh and the model's fit to it,
/// as produced by `fitter`.
pub fn generalization<F>(held_out: &[TriangleMesh], fitter: F, seed: u64) -> Result<f64>
where
    F: Fn(&TriangleMesh) -> Result<TriangleMesh>,
{
    if held_out.is_empty() {
        return Err(Error::invalid("generalization needs at least one held-out mesh"));
    }
    let mut total = 0.0;
    for target in held_out {
        let fitted = fitter(target)?;
        total += symmetric_surface_distance(&fitted, target, DISTANCE_SAMPLES, seed)?.mean;
    }
    Ok(total / held_out.len() as f64)
}
