use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::LowRankGp;
use crate::geometry::Point;
use crate::kernels::{gram_matrix, KernelExpr};
use crate::linalg::{cholesky_with_jitter, least_squares};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct ProjectionReport {
    /// Mean over trials of `|u - u_proj|^2 / |u - mu|^2`.
    pub mean_error: f64,
    pub trial_errors: Vec<f64>,
    pub rank: usize,
    pub probes: usize,
}

/// How well a low-rank model represents exact samples of the full process.
///
/// Each trial draws `u ~ N(mu, K)` at the probe points from a dense Cholesky factor of
/// the full kernel, fits the model coefficients by least squares, and records the
/// relative squared residual.
pub fn projection_error_experiment(
    kernel: &KernelExpr,
    gp: &LowRankGp,
    probes: &[Point],
    trials: usize,
    seed: u64,
) -> Result<ProjectionReport> {
    if probes.is_empty() || trials == 0 {
        return Err(Error::invalid("the projection experiment needs probe points and at least one trial"));
    }
    if kernel.dim() != gp.dim() {
        return Err(Error::DimensionMismatch("kernel and model have different output dimensions".into()));
    }
    let d = kernel.dim();
    let m = probes.len() * d;
    let (chol, _) = cholesky_with_jitter(&gram_matrix(kernel, probes))?;
    let (_, basis3) = gp.mean_and_basis(probes);
    let phi = DMatrix::from_fn(m, gp.rank(), |row, j| basis3[((row / d) * 3 + row % d, j)]);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DMatrix::from_fn(m, trials, |_, _| StandardNormal.sample(&mut rng));
    // Deviations from the mean; the mean cancels in the relative error.
    let samples = chol.l() * z;
    let coeffs = least_squares(&phi, &samples)?;
    let residual = &samples - &phi * coeffs;
    let trial_errors: Vec<f64> = (0..trials)
        .map(|t| residual.column(t).norm_squared() / samples.column(t).norm_squared())
        .collect();
    Ok(ProjectionReport {
        mean_error: trial_errors.iter().sum::<f64>() / trials as f64,
        trial_errors,
        rank: gp.rank(),
        probes: probes.len(),
    })
}
