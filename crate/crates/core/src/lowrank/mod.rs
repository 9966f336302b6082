//! Low-rank Gaussian process models.
//!
//! The covariance operator `(T f)(x) = int k(x, y) f(y) d rho(y)` is discretized on a
//! weighted quadrature set `{(x_l, w_l)}` (the Nystrom points). Its eigenpairs are
//! estimated from `M = W^1/2 K W^1/2`, where `K` is the block Gram matrix and `W` the
//! diagonal of weights: with `M u = lambda u`,
//!
//! ```text
//! phi(x_l) = u_l / sqrt(w_l)
//! phi(x)   = 1/lambda * sum_l w_l k(x, x_l) phi(x_l)        (Nystrom extension)
//! ```
//!
//! For uniform weights `1/n` the eigenvalues are `lambda_mat / n`. The extension
//! reproduces `phi` at the Nystrom points, where the functions are orthonormal under the
//! weighted empirical measure. A model stores, for each retained component, the weights
//! `c_lj` with `sqrt(lambda_j) phi_j(x) = sum_l k(x, x_l) c_lj`.

mod bounds;
pub mod io;
mod projection;
mod sampler;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

pub use bounds::{eigenfunction_bound, eigenvalue_bound, tau_for_confidence, EigenfunctionBound};
pub use projection::{projection_error_experiment, ProjectionReport};
pub use sampler::{DomainSampler, QuadratureSet};

use crate::geometry::{Point, Vector};
use crate::kernels::{cross_matrix, gram_matrix, EmpiricalKernel, KernelExpr};
use crate::linalg::{leading_eigenpairs, par_matmul, RsvdOptions};
use crate::{Error, Result};

/// Components below this fraction of the leading eigenvalue are dropped.
pub const EIGENVALUE_CUTOFF: f64 = 1e-10;

/// Points per block when evaluating the model at many points.
const EVAL_BLOCK: usize = 64;

/// A mean deformation field.
pub trait MeanFn: Send + Sync {
    fn mean_at(&self, x: &Point) -> Vector;
}

/// The prior mean of a model before any conditioning.
#[derive(Debug, Clone, Default)]
pub enum MeanFunction {
    #[default]
    Zero,
    /// The sample mean of an empirical kernel's training fields.
    Empirical(Arc<EmpiricalKernel>),
}

impl MeanFunction {
    /// Name stored in model files.
    pub fn reference(&self) -> &'static str {
        match self {
            MeanFunction::Zero => "zero",
            MeanFunction::Empirical(_) => "empirical",
        }
    }

    /// Resolves a stored reference against the model kernel.
    pub fn from_reference(name: &str, kernel: &KernelExpr) -> Result<Self> {
        match name {
            "zero" => Ok(MeanFunction::Zero),
            "empirical" => kernel
                .find_empirical()
                .map(MeanFunction::Empirical)
                .ok_or_else(|| Error::invalid("empirical mean requested but the kernel has no empirical node")),
            other => Err(Error::invalid(format!("unknown mean reference '{other}'"))),
        }
    }

    /// The natural mean for a kernel: the sample mean if it contains an empirical node.
    pub fn for_kernel(kernel: &KernelExpr) -> Self {
        kernel.find_empirical().map(MeanFunction::Empirical).unwrap_or_default()
    }
}

impl MeanFn for MeanFunction {
    fn mean_at(&self, x: &Point) -> Vector {
        match self {
            MeanFunction::Zero => Vector::zeros(),
            MeanFunction::Empirical(e) => e.mean_at(x),
        }
    }
}

/// Truncated Karhunen-Loeve expansion `u(x) = mu(x) + sum_i alpha_i sqrt(lambda_i) phi_i(x)`.
#[derive(Debug, Clone)]
pub struct LowRankGp {
    kernel: KernelExpr,
    kernel_dsl: Option<String>,
    mean: MeanFunction,
    quadrature: QuadratureSet,
    /// Optional `n d` vector `m` adding `sum_l k(x, x_l) m_l` to the mean (posterior models).
    mean_weights: Option<DVector<f64>>,
    /// `n d x r`
    basis_weights: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    total_variance: f64,
}

/// A fixed deformation field drawn from, or fitted with, a model.
#[derive(Debug, Clone)]
pub struct Deformation<'a> {
    gp: &'a LowRankGp,
    alpha: DVector<f64>,
}

impl Deformation<'_> {
    pub fn coefficients(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn at(&self, x: &Point) -> Vector {
        self.gp.instance_at(&self.alpha, x)
    }

    pub fn at_points(&self, points: &[Point]) -> Vec<Vector> {
        let (mean, basis) = self.gp.mean_and_basis(points);
        let delta = basis * &self.alpha;
        mean.iter()
            .enumerate()
            .map(|(i, m)| m + Vector::new(delta[3 * i], delta[3 * i + 1], delta[3 * i + 2]))
            .collect()
    }
}

/// Builds a low-rank model with `r` components from `n` sampled Nystrom points.
///
/// Components whose eigenvalue falls below `1e-10` times the largest are dropped, so the
/// returned model may have fewer than `r` components; [`LowRankGp::rank`] reports the
/// achieved rank. Fails only when nothing survives.
pub fn build_lowrank(
    kernel: &KernelExpr,
    mean: MeanFunction,
    sampler: &DomainSampler,
    n: usize,
    r: usize,
    rsvd: RsvdOptions,
    seed: u64,
) -> Result<LowRankGp> {
    let quadrature = sampler.sample(n, seed)?;
    build_from_quadrature(kernel, mean, quadrature, r, rsvd, seed.wrapping_add(1))
}

/// Like [`build_lowrank`] with an explicit weighted quadrature set.
pub fn build_from_quadrature(
    kernel: &KernelExpr,
    mean: MeanFunction,
    quadrature: QuadratureSet,
    r: usize,
    rsvd: RsvdOptions,
    seed: u64,
) -> Result<LowRankGp> {
    let d = kernel.dim();
    let n = quadrature.len();
    if quadrature.weights.len() != n || n == 0 {
        return Err(Error::invalid("quadrature set needs one weight per point"));
    }
    if r == 0 || r > n * d {
        return Err(Error::invalid(format!(
            "requested rank {r} must be between 1 and {} (points x output dimension)",
            n * d
        )));
    }
    let sqrt_w: Vec<f64> = quadrature.weights.iter().flat_map(|w| std::iter::repeat_n(w.sqrt(), d)).collect();
    let mut m = gram_matrix(kernel, &quadrature.points);
    let total_variance = if kernel.is_stationary() {
        kernel.eval(&quadrature.points[0], &quadrature.points[0]).trace()
    } else {
        (0..n * d).map(|i| m[(i, i)] * quadrature.weights[i / d]).sum()
    };
    for c in 0..n * d {
        for rr in 0..n * d {
            m[(rr, c)] *= sqrt_w[rr] * sqrt_w[c];
        }
    }
    let mut pairs = leading_eigenpairs(&m, r, rsvd, seed)?;
    pairs.canonicalize_signs();
    let lambda1 = pairs.values.first().copied().unwrap_or(0.0);
    if !(lambda1 > 0.0) {
        return Err(Error::numerical("the kernel has no positive eigenvalue on the sampled domain"));
    }
    let kept = pairs.values.iter().take_while(|&&l| l > EIGENVALUE_CUTOFF * lambda1).count();
    if kept < r {
        log::warn!("requested rank {r}, but only {kept} components are numerically nonzero");
    }
    let pairs = pairs.truncate(kept);
    let basis_weights = DMatrix::from_fn(n * d, kept, |row, j| sqrt_w[row] * pairs.vectors[(row, j)] / pairs.values[j].sqrt());
    Ok(LowRankGp {
        kernel: kernel.clone(),
        kernel_dsl: None,
        mean,
        quadrature,
        mean_weights: None,
        basis_weights,
        eigenvalues: pairs.values,
        total_variance,
    })
}

/// Monte-Carlo estimate of `int trace k(x, x) d rho(x)`; exact for stationary kernels.
pub fn total_variance(kernel: &KernelExpr, sampler: &DomainSampler, n: usize, seed: u64) -> Result<f64> {
    if kernel.is_stationary() {
        let o = Point::origin();
        return Ok(kernel.eval(&o, &o).trace());
    }
    let q = sampler.sample(n, seed)?;
    let parts: Vec<f64> = q
        .points
        .par_iter()
        .zip(q.weights.par_iter())
        .map(|(x, w)| w * kernel.eval(x, x).trace())
        .collect();
    Ok(parts.iter().sum())
}

/// Smallest rank whose cumulative variance exceeds `p * total`.
pub fn choose_rank(eigenvalues: &[f64], total: f64, p: f64) -> Result<usize> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("variance fraction must lie in (0, 1), got {p}")));
    }
    if !(total > 0.0) {
        return Err(Error::invalid("total variance must be positive"));
    }
    let mut acc = 0.0;
    for (i, l) in eigenvalues.iter().enumerate() {
        acc += l;
        if acc / total > p {
            return Ok(i + 1);
        }
    }
    Err(Error::InsufficientSpectrum {
        retained: acc / total,
        requested: p,
    })
}

impl LowRankGp {
    /// Reassembles a model from stored parts (see [`io`]).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        kernel: KernelExpr,
        mean: MeanFunction,
        quadrature: QuadratureSet,
        mean_weights: Option<DVector<f64>>,
        basis_weights: DMatrix<f64>,
        eigenvalues: Vec<f64>,
        total_variance: f64,
    ) -> Result<Self> {
        let nd = quadrature.len() * kernel.dim();
        if quadrature.weights.len() != quadrature.len()
            || basis_weights.nrows() != nd
            || basis_weights.ncols() != eigenvalues.len()
            || mean_weights.as_ref().is_some_and(|m| m.len() != nd)
        {
            return Err(Error::DimensionMismatch("model parts have inconsistent sizes".into()));
        }
        if eigenvalues.iter().any(|l| !(*l > 0.0)) || eigenvalues.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::invalid("eigenvalues must be positive and descending"));
        }
        Ok(LowRankGp {
            kernel,
            kernel_dsl: None,
            mean,
            quadrature,
            mean_weights,
            basis_weights,
            eigenvalues,
            total_variance,
        })
    }

    /// Attaches the DSL text the kernel was compiled from (needed to save the model).
    pub fn with_kernel_dsl(mut self, dsl: impl Into<String>) -> Self {
        self.kernel_dsl = Some(dsl.into());
        self
    }

    pub fn kernel(&self) -> &KernelExpr {
        &self.kernel
    }

    pub fn kernel_dsl(&self) -> Option<&str> {
        self.kernel_dsl.as_deref()
    }

    pub fn mean_function(&self) -> &MeanFunction {
        &self.mean
    }

    pub fn dim(&self) -> usize {
        self.kernel.dim()
    }

    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn total_variance(&self) -> f64 {
        self.total_variance
    }

    /// Fraction of the total variance the retained components explain.
    pub fn retained_variance(&self) -> f64 {
        self.eigenvalues.iter().sum::<f64>() / self.total_variance
    }

    pub fn nystrom_points(&self) -> &[Point] {
        &self.quadrature.points
    }

    pub fn quadrature_weights(&self) -> &[f64] {
        &self.quadrature.weights
    }

    pub fn quadrature(&self) -> &QuadratureSet {
        &self.quadrature
    }

    pub fn basis_weights(&self) -> &DMatrix<f64> {
        &self.basis_weights
    }

    pub fn mean_weights(&self) -> Option<&DVector<f64>> {
        self.mean_weights.as_ref()
    }

    /// Keeps the leading `r` components.
    pub fn truncate(&self, r: usize) -> Result<Self> {
        if r == 0 || r > self.rank() {
            return Err(Error::invalid(format!("cannot truncate a rank-{} model to rank {r}", self.rank())));
        }
        let mut out = self.clone();
        out.eigenvalues.truncate(r);
        out.basis_weights = self.basis_weights.columns(0, r).into_owned();
        Ok(out)
    }

    pub(crate) fn with_posterior(&self, mean_weights: DVector<f64>, basis_weights: DMatrix<f64>, eigenvalues: Vec<f64>) -> Self {
        LowRankGp {
            mean_weights: Some(mean_weights),
            basis_weights,
            eigenvalues,
            ..self.clone()
        }
    }

    /// Mean at `points` and the `3N x r` matrix whose column `i` stacks
    /// `sqrt(lambda_i) phi_i(x_j)` point-major (x, y, z per point). For 1-dimensional
    /// models the y and z rows are zero.
    pub fn mean_and_basis(&self, points: &[Point]) -> (Vec<Vector>, DMatrix<f64>) {
        let d = self.dim();
        let r = self.rank();
        let blocks: Vec<(Vec<Vector>, DMatrix<f64>)> = points
            .par_chunks(EVAL_BLOCK)
            .map(|chunk| {
                let kx = cross_matrix(&self.kernel, chunk, &self.quadrature.points);
                let b = &kx * &self.basis_weights;
                let offset = self.mean_weights.as_ref().map(|m| &kx * m);
                let means = chunk
                    .iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let mut v = self.mean.mean_at(x);
                        if let Some(o) = &offset {
                            for a in 0..d {
                                v[a] += o[i * d + a];
                            }
                        }
                        v
                    })
                    .collect();
                (means, b)
            })
            .collect();
        let mut means = Vec::with_capacity(points.len());
        let mut basis = DMatrix::zeros(points.len() * 3, r);
        for (blk, (m, b)) in blocks.into_iter().enumerate() {
            let start = blk * EVAL_BLOCK;
            for i in 0..m.len() {
                for a in 0..d {
                    basis.row_mut((start + i) * 3 + a).copy_from(&b.row(i * d + a));
                }
            }
            means.extend(m);
        }
        (means, basis)
    }

    /// The `3 x r` basis at a single point.
    pub fn basis_at(&self, x: &Point) -> DMatrix<f64> {
        self.mean_and_basis(std::slice::from_ref(x)).1
    }

    pub fn mean_at(&self, x: &Point) -> Vector {
        self.mean_and_basis(std::slice::from_ref(x)).0[0]
    }

    /// `phi_i(x)`, unit norm under the sampling measure.
    pub fn eigenfunction(&self, i: usize, x: &Point) -> Vector {
        let b = self.basis_at(x);
        Vector::new(b[(0, i)], b[(1, i)], b[(2, i)]) / self.eigenvalues[i].sqrt()
    }

    fn check_len(&self, alpha: &DVector<f64>) -> Result<()> {
        if alpha.len() == self.rank() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "{} coefficients given for a rank-{} model",
                alpha.len(),
                self.rank()
            )))
        }
    }

    fn instance_at(&self, alpha: &DVector<f64>, x: &Point) -> Vector {
        let (mean, basis) = self.mean_and_basis(std::slice::from_ref(x));
        let d = basis * alpha;
        mean[0] + Vector::new(d[0], d[1], d[2])
    }

    /// The deformation with coefficients `alpha`.
    pub fn evaluate(&self, alpha: DVector<f64>) -> Result<Deformation<'_>> {
        self.check_len(&alpha)?;
        Ok(Deformation { gp: self, alpha })
    }

    /// Standard-normal coefficients, deterministic for a fixed seed.
    pub fn sample_coefficients(&self, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DVector::from_fn(self.rank(), |_, _| StandardNormal.sample(&mut rng))
    }

    /// A random deformation from the model.
    pub fn sample(&self, seed: u64) -> Deformation<'_> {
        Deformation {
            gp: self,
            alpha: self.sample_coefficients(seed),
        }
    }
}

impl MeanFn for LowRankGp {
    fn mean_at(&self, x: &Point) -> Vector {
        LowRankGp::mean_at(self, x)
    }
}

/// `sum_i lambda_i phi_i(x) phi_i(y)^T` as 3x3 blocks for the given points, from a basis
/// matrix produced by [`LowRankGp::mean_and_basis`].
pub fn truncated_covariance(basis: &DMatrix<f64>) -> DMatrix<f64> {
    par_matmul(basis, &basis.transpose())
}

#[cfg(test)]
mod tests;
