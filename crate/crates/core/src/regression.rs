//! Gaussian process regression: conditioning a prior on known displacements.
//!
//! For observations `Y` at points `X` with isotropic noise variance `s2`,
//!
//! ```text
//! mu_p(x)    = mu(x) + K_X(x)^T (K_XX + s2 I)^-1 (Y - mu_X)
//! k_p(x, y)  = k(x, y) - K_X(x)^T (K_XX + s2 I)^-1 K_X(y)
//! ```
//!
//! [`posterior_full`] implements this exactly; [`posterior_lowrank`] does the same
//! regression in the coefficient space of a low-rank model and returns a new model.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix3};

use crate::geometry::{Landmark, Point, Vector};
use crate::kernels::{cross_matrix, gram_matrix, KernelExpr, MatrixKernel};
use crate::linalg::{cholesky_with_jitter, symmetric_eigen};
use crate::lowrank::{LowRankGp, MeanFn};
use crate::{Error, Result};

/// Relative eigenvalue cutoff for the basis of a low-rank posterior.
const POSTERIOR_CUTOFF: f64 = 1e-9;

/// Observed displacements with isotropic Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    points: Vec<Point>,
    values: Vec<Vector>,
    noise_variance: f64,
}

impl ObservationSet {
    /// Rejects a negative variance, non-finite input, and (for exact observations) the
    /// same point observed with two different values.
    pub fn new(points: Vec<Point>, values: Vec<Vector>, noise_variance: f64) -> Result<Self> {
        if points.len() != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} observation points but {} values",
                points.len(),
                values.len()
            )));
        }
        if !(noise_variance >= 0.0 && noise_variance.is_finite()) {
            return Err(Error::invalid(format!("noise variance must be non-negative, got {noise_variance}")));
        }
        let finite = points.iter().all(|p| p.coords.iter().all(|c| c.is_finite()))
            && values.iter().all(|v| v.iter().all(|c| c.is_finite()));
        if !finite {
            return Err(Error::invalid("observations must be finite"));
        }
        if noise_variance == 0.0 {
            for i in 0..points.len() {
                for j in 0..i {
                    if points[i] == points[j] && values[i] != values[j] {
                        return Err(Error::invalid(format!(
                            "point {} is observed twice with different values and no noise",
                            points[i]
                        )));
                    }
                }
            }
        }
        Ok(ObservationSet {
            points,
            values,
            noise_variance,
        })
    }

    pub fn empty() -> Self {
        ObservationSet {
            points: Vec::new(),
            values: Vec::new(),
            noise_variance: 0.0,
        }
    }

    /// Pairs reference and target landmarks by name; each observation is the displacement
    /// `target - reference` at the reference position.
    pub fn from_landmarks(reference: &[Landmark], target: &[Landmark], noise_variance: f64) -> Result<Self> {
        let targets: HashMap<&str, &Landmark> = target.iter().map(|l| (l.name.as_str(), l)).collect();
        let mut points = Vec::new();
        let mut values = Vec::new();
        for r in reference {
            let t = targets
                .get(r.name.as_str())
                .ok_or_else(|| Error::invalid(format!("landmark '{}' has no counterpart in the target set", r.name)))?;
            points.push(r.point);
            values.push(t.point - r.point);
        }
        if reference.len() != target.len() {
            return Err(Error::invalid("reference and target landmark sets have different names"));
        }
        Self::new(points, values, noise_variance)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn values(&self) -> &[Vector] {
        &self.values
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Concatenation; both sets must share the noise variance.
    pub fn concat(&self, other: &ObservationSet) -> Result<Self> {
        if self.noise_variance != other.noise_variance && !self.is_empty() && !other.is_empty() {
            return Err(Error::invalid("cannot merge observation sets with different noise"));
        }
        let noise = if self.is_empty() { other.noise_variance } else { self.noise_variance };
        Self::new(
            [self.points.clone(), other.points.clone()].concat(),
            [self.values.clone(), other.values.clone()].concat(),
            noise,
        )
    }
}

/// `k_p(x, y)` for a prior kernel conditioned on observation locations. Only the points
/// and the noise matter, not the observed values. The Cholesky factor of
/// `K_XX + s2 I` is computed once.
pub struct PosteriorKernel {
    prior: KernelExpr,
    points: Vec<Point>,
    noise_variance: f64,
    factor: Option<Cholesky<f64, Dyn>>,
    jitter: f64,
}

impl std::fmt::Debug for PosteriorKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PosteriorKernel")
            .field("prior", &self.prior)
            .field("points", &self.points.len())
            .field("noise_variance", &self.noise_variance)
            .field("jitter", &self.jitter)
            .finish()
    }
}

impl PosteriorKernel {
    pub fn new(prior: KernelExpr, points: Vec<Point>, noise_variance: f64) -> Result<Self> {
        if !(noise_variance >= 0.0 && noise_variance.is_finite()) {
            return Err(Error::invalid(format!("noise variance must be non-negative, got {noise_variance}")));
        }
        let (factor, jitter) = if points.is_empty() {
            (None, 0.0)
        } else {
            let mut k = gram_matrix(&prior, &points);
            for i in 0..k.nrows() {
                k[(i, i)] += noise_variance;
            }
            let (c, j) = cholesky_with_jitter(&k)?;
            (Some(c), j)
        };
        Ok(PosteriorKernel {
            prior,
            points,
            noise_variance,
            factor,
            jitter,
        })
    }

    pub fn prior(&self) -> &KernelExpr {
        &self.prior
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    /// Diagonal jitter that was needed to factor `K_XX + s2 I`.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `L^-1 K_X(x)`, an `m d x d` matrix.
    fn whitened(&self, factor: &Cholesky<f64, Dyn>, x: &Point) -> DMatrix<f64> {
        let kx = cross_matrix(&self.prior, &self.points, std::slice::from_ref(x));
        factor.l_dirty().solve_lower_triangular(&kx).expect("Cholesky factor is nonsingular")
    }

    /// `(K_XX + s2 I)^-1 b`
    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match &self.factor {
            Some(f) => f.solve(b),
            None => DVector::zeros(0),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn eval(&self, x: &Point, y: &Point) -> Matrix3<f64> {
        let mut k = self.prior.eval(x, y);
        if let Some(f) = &self.factor {
            let d = self.prior.dim();
            let vx = self.whitened(f, x);
            let vy = if x == y { vx.clone() } else { self.whitened(f, y) };
            let corr = vx.transpose() * vy;
            for a in 0..d {
                for b in 0..d {
                    k[(a, b)] -= corr[(a, b)];
                }
            }
        }
        k
    }
}

impl MatrixKernel for PosteriorKernel {
    fn output_dim(&self) -> usize {
        PosteriorKernel::output_dim(self)
    }

    fn eval(&self, x: &Point, y: &Point) -> Matrix3<f64> {
        PosteriorKernel::eval(self, x, y)
    }
}

/// `mu_p(x) = mu(x) + K_X(x)^T c` with `c = (K_XX + s2 I)^-1 (Y - mu_X)`.
pub struct PosteriorMean {
    prior_mean: Arc<dyn MeanFn>,
    kernel: Arc<PosteriorKernel>,
    coefficients: DVector<f64>,
}

impl MeanFn for PosteriorMean {
    fn mean_at(&self, x: &Point) -> Vector {
        let mut m = self.prior_mean.mean_at(x);
        if self.coefficients.is_empty() {
            return m;
        }
        let d = self.kernel.output_dim();
        let kx = cross_matrix(&self.kernel.prior, &self.kernel.points, std::slice::from_ref(x));
        let delta = kx.transpose() * &self.coefficients;
        for a in 0..d {
            m[a] += delta[a];
        }
        m
    }
}

fn stacked(values: impl Iterator<Item = Vector>, d: usize) -> DVector<f64> {
    DVector::from_vec(values.flat_map(|v| (0..d).map(move |a| v[a])).collect())
}

/// Exact posterior process given a prior mean and kernel.
pub fn posterior_full(
    mean: Arc<dyn MeanFn>,
    kernel: &KernelExpr,
    obs: &ObservationSet,
) -> Result<(PosteriorMean, Arc<PosteriorKernel>)> {
    let d = kernel.dim();
    let post = Arc::new(PosteriorKernel::new(kernel.clone(), obs.points.clone(), obs.noise_variance)?);
    let residual = stacked(obs.points.iter().zip(&obs.values).map(|(p, v)| v - mean.mean_at(p)), d);
    let coefficients = post.solve(&residual);
    let post_mean = PosteriorMean {
        prior_mean: mean,
        kernel: post.clone(),
        coefficients,
    };
    Ok((post_mean, post))
}

/// Result of conditioning a low-rank model.
#[derive(Debug, Clone)]
pub struct LowRankPosterior {
    /// Posterior mean of the prior coefficients.
    pub coef_mean: DVector<f64>,
    /// Posterior covariance of the prior coefficients.
    pub coef_cov: DMatrix<f64>,
    /// The posterior as a model of its own, with orthonormal eigenfunctions.
    pub model: LowRankGp,
}

/// Bayesian linear regression on the model coefficients.
///
/// With `Phi` the stacked basis at the observation points and `M = Phi^T Phi + s2 I`,
/// the coefficient posterior is `N(M^-1 Phi^T (Y - mu_X), s2 M^-1)`. The returned model
/// has mean `mu + Phi alpha_bar` and the eigen-decomposed posterior covariance as basis;
/// components whose variance is (numerically) removed by the observations are dropped.
/// Exact observations (`s2 = 0`) are handled with a small diagonal jitter.
pub fn posterior_lowrank(gp: &LowRankGp, obs: &ObservationSet) -> Result<LowRankPosterior> {
    let r = gp.rank();
    if obs.is_empty() {
        return Ok(LowRankPosterior {
            coef_mean: DVector::zeros(r),
            coef_cov: DMatrix::identity(r, r),
            model: gp.clone(),
        });
    }
    let d = gp.dim();
    let (means, basis3) = gp.mean_and_basis(&obs.points);
    let m = obs.len() * d;
    let phi = DMatrix::from_fn(m, r, |row, j| basis3[((row / d) * 3 + row % d, j)]);
    let y = stacked(obs.values.iter().zip(&means).map(|(v, mu)| v - mu), d);

    let gram = phi.transpose() * &phi;
    let noise = if obs.noise_variance > 0.0 {
        obs.noise_variance
    } else {
        1e-10 * (gram.trace() / r as f64).max(f64::MIN_POSITIVE)
    };
    let mut system = gram.clone();
    for i in 0..r {
        system[(i, i)] += noise;
    }
    let (chol, _) = cholesky_with_jitter(&system)?;
    let coef_mean = chol.solve(&(phi.transpose() * y));
    let mut coef_cov = chol.inverse() * noise;
    coef_cov = (&coef_cov + coef_cov.transpose()) * 0.5;

    let sqrt_l = DVector::from_iterator(r, gp.eigenvalues().iter().map(|l| l.sqrt()));
    let scaled = DMatrix::from_fn(r, r, |i, j| sqrt_l[i] * coef_cov[(i, j)] * sqrt_l[j]);
    let mut eig = symmetric_eigen(scaled);
    eig.canonicalize_signs();
    let top = eig.values.first().copied().unwrap_or(0.0);
    let kept = eig.values.iter().take_while(|&&v| v > POSTERIOR_CUTOFF * top && top > 0.0).count();
    if kept == 0 {
        return Err(Error::numerical("the observations leave no variance in the model"));
    }
    let eig = eig.truncate(kept);
    let rotation = DMatrix::from_fn(r, kept, |i, j| eig.vectors[(i, j)] / sqrt_l[i] * eig.values[j].sqrt());
    let basis_weights = gp.basis_weights() * rotation;
    let base_offset = gp.mean_weights().cloned().unwrap_or_else(|| DVector::zeros(gp.basis_weights().nrows()));
    let mean_weights = base_offset + gp.basis_weights() * &coef_mean;
    let model = gp.with_posterior(mean_weights, basis_weights, eig.values);
    Ok(LowRankPosterior {
        coef_mean,
        coef_cov,
        model,
    })
}
