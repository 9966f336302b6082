use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::geometry::{ClosestPointIndex, Point, ScalarImage, TriangleMesh, Vector};
use crate::lowrank::LowRankGp;
use crate::{Error, Result};

/// Integration points per parallel work item. Fixed so the reduction order, and with it
/// every result bit, does not depend on the thread count.
const CHUNK: usize = 256;

/// A registration energy `D(alpha) + eta * |alpha|^2` whose data term is a mean of
/// per-point squared residuals over a fixed set of integration points.
pub trait Energy: Send + Sync {
    /// Number of model coefficients.
    fn rank(&self) -> usize;

    fn eta(&self) -> f64;

    /// Number of integration points.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sum of squared residuals over the selected integration points (all of them for
    /// `None`) and the gradient of that sum with respect to `alpha`.
    fn residual_sum(&self, alpha: &DVector<f64>, indices: Option<&[usize]>) -> (f64, DVector<f64>);

    /// Re-establishes correspondences at `alpha`. A no-op for energies without them.
    fn refresh(&mut self, _alpha: &DVector<f64>) {}

    /// Iterations between correspondence refreshes, if the energy has correspondences.
    fn refresh_interval(&self) -> Option<usize> {
        None
    }
}

/// Value and gradient of an energy at one coefficient vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyValue {
    /// Mean squared residual.
    pub data: f64,
    /// `|alpha|^2`, the squared RKHS norm of the deformation.
    pub regularizer: f64,
    /// `data + eta * regularizer`.
    pub total: f64,
    pub gradient: DVector<f64>,
}

/// Evaluates `energy` at `alpha` over all integration points.
pub fn energy_and_gradient(energy: &dyn Energy, alpha: &DVector<f64>) -> Result<EnergyValue> {
    if alpha.len() != energy.rank() {
        return Err(Error::DimensionMismatch(format!(
            "{} coefficients given for a rank-{} energy",
            alpha.len(),
            energy.rank()
        )));
    }
    Ok(evaluate(energy, alpha, None))
}

pub(crate) fn evaluate(energy: &dyn Energy, alpha: &DVector<f64>, indices: Option<&[usize]>) -> EnergyValue {
    let count = indices.map_or(energy.len(), <[usize]>::len).max(1) as f64;
    let (sum, grad) = energy.residual_sum(alpha, indices);
    let eta = energy.eta();
    let regularizer = alpha.norm_squared();
    let data = sum / count;
    EnergyValue {
        data,
        regularizer,
        total: data + eta * regularizer,
        gradient: grad / count + alpha * (2.0 * eta),
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if eta >= 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("eta must be finite and non-negative, got {eta}")))
    }
}

/// Model mean and basis at fixed integration points, evaluated once per fit.
#[derive(Debug, Clone)]
struct Precomputed {
    points: Vec<Point>,
    means: Vec<Vector>,
    /// Transposed `3N x r` basis, so each point's rows are contiguous columns.
    basis_t: DMatrix<f64>,
}

impl Precomputed {
    fn new(model: &LowRankGp, points: Vec<Point>) -> Self {
        let (means, basis) = model.mean_and_basis(&points);
        Precomputed {
            points,
            means,
            basis_t: basis.transpose(),
        }
    }

    fn rank(&self) -> usize {
        self.basis_t.nrows()
    }

    /// `x_j + u(x_j)` for the deformation with coefficients `alpha`.
    fn warped(&self, j: usize, alpha: &DVector<f64>) -> Point {
        let mut d = self.means[j];
        for a in 0..3 {
            d[a] += self.basis_t.column(3 * j + a).dot(alpha);
        }
        self.points[j] + d
    }

    /// Sums `residual(j, warped point) = (r^2, dr^2/dy)` over the selection and chains
    /// the spatial gradients through the basis.
    fn accumulate<F>(&self, alpha: &DVector<f64>, indices: Option<&[usize]>, residual: F) -> (f64, DVector<f64>)
    where
        F: Fn(usize, &Point) -> (f64, Vector) + Sync,
    {
        let all: Vec<usize>;
        let idx = match indices {
            Some(i) => i,
            None => {
                all = (0..self.points.len()).collect();
                &all
            }
        };
        let r = self.rank();
        let partial: Vec<(f64, DVector<f64>)> = idx
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut value = 0.0;
                let mut grad = DVector::zeros(r);
                for &j in chunk {
                    let y = self.warped(j, alpha);
                    let (v, g) = residual(j, &y);
                    value += v;
                    for a in 0..3 {
                        if g[a] != 0.0 {
                            grad.axpy(g[a], &self.basis_t.column(3 * j + a), 1.0);
                        }
                    }
                }
                (value, grad)
            })
            .collect();
        partial
            .into_iter()
            .fold((0.0, DVector::zeros(r)), |(v, g), (pv, pg)| (v + pv, g + pg))
    }
}

/// Mean squared closest-point distance from the warped reference surface to the target.
///
/// By default every evaluation looks the closest points up anew, which is the true
/// closest-point energy; its gradient `2 (y - CP(y))` is exact wherever the closest
/// point is unique. [`refresh`](Energy::refresh) freezes the correspondences at the
/// given coefficients, turning the data term into a quadratic that the fit minimizes
/// for a few iterations before refreshing again.
#[derive(Debug, Clone)]
pub struct SurfaceEnergy {
    pre: Precomputed,
    target: ClosestPointIndex,
    eta: f64,
    frozen: Option<Vec<Point>>,
}

/// Fit iterations per frozen correspondence.
pub const SURFACE_REFRESH_INTERVAL: usize = 5;

impl SurfaceEnergy {
    /// Integration points are `n_points` area-uniform samples on `reference`.
    pub fn new(
        model: &LowRankGp,
        reference: &TriangleMesh,
        target: &TriangleMesh,
        eta: f64,
        n_points: usize,
        seed: u64,
    ) -> Result<Self> {
        let points = reference.sample_surface_points(n_points, seed)?;
        SurfaceEnergy::from_points(model, points, ClosestPointIndex::new(target)?, eta)
    }

    pub fn from_points(model: &LowRankGp, points: Vec<Point>, target: ClosestPointIndex, eta: f64) -> Result<Self> {
        check_eta(eta)?;
        if points.is_empty() {
            return Err(Error::invalid("surface energy needs at least one integration point"));
        }
        Ok(SurfaceEnergy {
            pre: Precomputed::new(model, points),
            target,
            eta,
            frozen: None,
        })
    }

    pub fn with_eta(mut self, eta: f64) -> Result<Self> {
        check_eta(eta)?;
        self.eta = eta;
        Ok(self)
    }

    pub fn points(&self) -> &[Point] {
        &self.pre.points
    }

    /// Drops frozen correspondences so evaluations use live closest points again.
    pub fn unfreeze(&mut self) {
        self.frozen = None;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    /// Mean closest-point distance (not squared) of the warped integration points.
    pub fn mean_distance(&self, alpha: &DVector<f64>) -> f64 {
        let d: Vec<f64> = (0..self.pre.points.len())
            .into_par_iter()
            .map(|j| self.target.closest_point(&self.pre.warped(j, alpha)).distance)
            .collect();
        d.iter().sum::<f64>() / d.len() as f64
    }
}

impl Energy for SurfaceEnergy {
    fn rank(&self) -> usize {
        self.pre.rank()
    }

    fn eta(&self) -> f64 {
        self.eta
    }

    fn len(&self) -> usize {
        self.pre.points.len()
    }

    fn residual_sum(&self, alpha: &DVector<f64>, indices: Option<&[usize]>) -> (f64, DVector<f64>) {
        self.pre.accumulate(alpha, indices, |j, y| {
            let c = match &self.frozen {
                Some(f) => f[j],
                None => self.target.closest_point(y).point,
            };
            let r = y - c;
            (r.norm_squared(), r * 2.0)
        })
    }

    fn refresh(&mut self, alpha: &DVector<f64>) {
        let pre = &self.pre;
        let target = &self.target;
        self.frozen = Some(
            (0..pre.points.len())
                .into_par_iter()
                .map(|j| target.closest_point(&pre.warped(j, alpha)).point)
                .collect(),
        );
    }

    fn refresh_interval(&self) -> Option<usize> {
        Some(SURFACE_REFRESH_INTERVAL)
    }
}

/// Mean squared intensity difference `(I_T(x + u(x)) - I_R(x))^2` over points in the
/// reference image's domain. Target values outside its grid or mask are the target's
/// out-of-domain value, with zero gradient.
#[derive(Debug, Clone)]
pub struct ImageEnergy {
    pre: Precomputed,
    reference_values: Vec<f64>,
    target: ScalarImage,
    eta: f64,
}

impl ImageEnergy {
    /// Integration points are `n_points` voxel centres drawn without replacement from the
    /// reference's mask (all of them when `n_points` is at least their number).
    pub fn new(
        model: &LowRankGp,
        reference: &ScalarImage,
        target: &ScalarImage,
        eta: f64,
        n_points: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_points == 0 {
            return Err(Error::invalid("image energy needs at least one integration point"));
        }
        let mut centres = reference.masked_voxel_centers();
        if centres.is_empty() {
            return Err(Error::invalid("the reference image mask is empty"));
        }
        if n_points < centres.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut chosen = index::sample(&mut rng, centres.len(), n_points).into_vec();
            chosen.sort_unstable();
            centres = chosen.into_iter().map(|i| centres[i]).collect();
        }
        ImageEnergy::from_points(model, centres, reference, target, eta)
    }

    pub fn from_points(
        model: &LowRankGp,
        points: Vec<Point>,
        reference: &ScalarImage,
        target: &ScalarImage,
        eta: f64,
    ) -> Result<Self> {
        check_eta(eta)?;
        if points.is_empty() {
            return Err(Error::invalid("image energy needs at least one integration point"));
        }
        let reference_values = points.iter().map(|p| reference.interpolate(p)).collect();
        Ok(ImageEnergy {
            pre: Precomputed::new(model, points),
            reference_values,
            target: target.clone(),
            eta,
        })
    }

    pub fn with_eta(mut self, eta: f64) -> Result<Self> {
        check_eta(eta)?;
        self.eta = eta;
        Ok(self)
    }

    pub fn points(&self) -> &[Point] {
        &self.pre.points
    }

    /// Mean absolute intensity residual at the integration points.
    pub fn mean_abs_residual(&self, alpha: &DVector<f64>) -> f64 {
        let total: f64 = (0..self.pre.points.len())
            .map(|j| (self.target.interpolate(&self.pre.warped(j, alpha)) - self.reference_values[j]).abs())
            .sum();
        total / self.pre.points.len() as f64
    }
}

impl Energy for ImageEnergy {
    fn rank(&self) -> usize {
        self.pre.rank()
    }

    fn eta(&self) -> f64 {
        self.eta
    }

    fn len(&self) -> usize {
        self.pre.points.len()
    }

    fn residual_sum(&self, alpha: &DVector<f64>, indices: Option<&[usize]>) -> (f64, DVector<f64>) {
        self.pre.accumulate(alpha, indices, |j, y| {
            let (v, g) = self.target.interpolate_with_gradient(y);
            let r = v - self.reference_values[j];
            (r * r, g * (2.0 * r))
        })
    }
}

/// `I_T(x + u(x))` sampled on the reference grid: the target pulled back into the
/// reference frame by the deformation with coefficients `alpha`.
pub fn warp_image(model: &LowRankGp, alpha: &DVector<f64>, reference: &ScalarImage, target: &ScalarImage) -> Result<ScalarImage> {
    let deformation = model.evaluate(alpha.clone())?;
    let dims = reference.dims();
    let mut centres = Vec::with_capacity(dims.iter().product());
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                centres.push(reference.voxel_center(i, j, k));
            }
        }
    }
    let u = deformation.at_points(&centres);
    let voxels = centres.iter().zip(&u).map(|(x, d)| target.interpolate(&(x + d))).collect();
    let out = ScalarImage::new(dims, reference.spacing(), reference.origin(), voxels)?
        .with_out_of_domain_value(reference.out_of_domain_value());
    match reference.mask() {
        Some(m) => out.with_mask(m.to_vec()),
        None => Ok(out),
    }
}
