//! Matrix-valued covariance functions and their composition algebra.
//!
//! Kernels are built as immutable expression trees ([`KernelExpr`]). Every constructor
//! validates its parameters, and every composition rule (sums, positive scaling,
//! element-wise products, congruence by `R S`, multiplication by `w(x) w(y)`) preserves
//! positive semi-definiteness, so any tree that can be built is a valid covariance.
//!
//! Kernels have an output dimension `d` of 3 (deformation fields) or 1 (scalar fields,
//! used for the 1D experiments). Evaluation always returns a 3x3 matrix; for `d = 1`
//! only the top-left entry is meaningful and the rest is zero.

pub mod dsl;
mod empirical;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

pub use empirical::{DeformationField, EmpiricalKernel};
pub(crate) use empirical::shared_reference;

use crate::geometry::{Point, Vector};
use crate::regression::PosteriorKernel;
use crate::{Error, Result};

/// A covariance function `k(x, y)` with values in `R^{d x d}`.
pub trait MatrixKernel: Send + Sync + fmt::Debug {
    /// 1 or 3.
    fn output_dim(&self) -> usize;

    fn eval(&self, x: &Point, y: &Point) -> Matrix3<f64>;

    /// Stationary kernels depend on `x - y` only, so `k(x, x)` is constant.
    fn is_stationary(&self) -> bool {
        false
    }
}

/// Real-valued kernels lifted to matrices by [`KernelExpr::diag`] and [`KernelExpr::scalar`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarKernel {
    /// `exp(-|x - y|^2 / sigma^2)`
    Gaussian { sigma: f64 },
    /// `c` everywhere.
    Constant { c: f64 },
}

impl ScalarKernel {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        positive("kgauss sigma", sigma)?;
        Ok(ScalarKernel::Gaussian { sigma })
    }

    pub fn constant(c: f64) -> Result<Self> {
        positive("kconst c", c)?;
        Ok(ScalarKernel::Constant { c })
    }

    pub fn eval(&self, x: &Point, y: &Point) -> f64 {
        match *self {
            ScalarKernel::Gaussian { sigma } => (-(x - y).norm_squared() / (sigma * sigma)).exp(),
            ScalarKernel::Constant { c } => c,
        }
    }
}

/// Weight functions `w: R^3 -> [0, 1]` used to localize kernels.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightFn {
    One,
    /// 1 where `n . x >= offset`, else 0.
    Step { normal: Vector, offset: f64 },
    /// Smooth version of `Step`: `1 / (1 + exp(-(n . x - offset) / width))`.
    Logistic { normal: Vector, offset: f64, width: f64 },
    /// `1 - w(x)`.
    Complement(Box<WeightFn>),
}

impl WeightFn {
    pub fn step(normal: Vector, offset: f64) -> Result<Self> {
        finite_vec("step normal", &normal)?;
        Ok(WeightFn::Step { normal, offset })
    }

    pub fn logistic(normal: Vector, offset: f64, width: f64) -> Result<Self> {
        finite_vec("logistic normal", &normal)?;
        positive("logistic width", width)?;
        Ok(WeightFn::Logistic { normal, offset, width })
    }

    pub fn complement(inner: WeightFn) -> Self {
        WeightFn::Complement(Box::new(inner))
    }

    pub fn eval(&self, x: &Point) -> f64 {
        match self {
            WeightFn::One => 1.0,
            WeightFn::Step { normal, offset } => {
                if normal.dot(&x.coords) >= *offset {
                    1.0
                } else {
                    0.0
                }
            }
            WeightFn::Logistic { normal, offset, width } => {
                1.0 / (1.0 + (-(normal.dot(&x.coords) - offset) / width).exp())
            }
            WeightFn::Complement(w) => 1.0 - w.eval(x),
        }
    }
}

/// Node kinds of a kernel expression tree.
#[derive(Debug, Clone)]
pub enum Node {
    /// `s * I * exp(-|x - y|^2 / sigma^2)`
    Gauss { s: f64, sigma: f64 },
    /// `sum_{i=1..levels} (s / i) * I * exp(-|x - y|^2 / (sigma / i)^2)`
    Multiscale { s: f64, sigma: f64, levels: usize },
    /// `A * l(x, y)` with `A` symmetric positive semi-definite.
    Diag { a: Matrix3<f64>, inner: ScalarKernel },
    /// `l(x, y)` as a 1-dimensional kernel.
    Scalar(ScalarKernel),
    Sum(Vec<KernelExpr>),
    /// Element-wise product of the 3x3 blocks.
    Product(KernelExpr, KernelExpr),
    Scale { c: f64, inner: KernelExpr },
    /// `R S k(x, y) S^T R^T`
    Anisotropic {
        rotation: Matrix3<f64>,
        scales: Vector3<f64>,
        inner: KernelExpr,
    },
    /// `w(x) w(y) k(x, y)`
    Localize { weight: WeightFn, inner: KernelExpr },
    /// `sum_i w_i(x) w_i(y) k_i(x, y)` with `sum_i w_i = 1`.
    SpatiallyVarying(Vec<(WeightFn, KernelExpr)>),
    Empirical(Arc<EmpiricalKernel>),
    Posterior(Arc<PosteriorKernel>),
}

/// An immutable, cheaply clonable kernel expression tree.
#[derive(Debug, Clone)]
pub struct KernelExpr {
    node: Arc<Node>,
    dim: usize,
}

/// Points used to check the partition of unity of a spatially varying kernel when no
/// domain is given: an 11^3 grid over [-500, 500]^3 mm.
pub fn default_partition_check_points() -> Vec<Point> {
    let mut pts = Vec::with_capacity(11 * 11 * 11);
    for i in 0..11 {
        for j in 0..11 {
            for k in 0..11 {
                pts.push(Point::new(
                    -500.0 + 100.0 * i as f64,
                    -500.0 + 100.0 * j as f64,
                    -500.0 + 100.0 * k as f64,
                ));
            }
        }
    }
    pts
}

impl KernelExpr {
    fn wrap(node: Node, dim: usize) -> Self {
        KernelExpr {
            node: Arc::new(node),
            dim,
        }
    }

    pub fn node(&self) -> &Node {
        &self.node
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gauss(s: f64, sigma: f64) -> Result<Self> {
        positive("gauss s", s)?;
        positive("gauss sigma", sigma)?;
        Ok(Self::wrap(Node::Gauss { s, sigma }, 3))
    }

    pub fn multiscale(s: f64, sigma: f64, levels: usize) -> Result<Self> {
        positive("multiscale s", s)?;
        positive("multiscale sigma", sigma)?;
        if levels == 0 {
            return Err(Error::invalid("multiscale needs at least one level"));
        }
        Ok(Self::wrap(Node::Multiscale { s, sigma, levels }, 3))
    }

    /// `A * l(x, y)`; `A` must be symmetric positive semi-definite.
    pub fn diag(a: Matrix3<f64>, inner: ScalarKernel) -> Result<Self> {
        validate_diag_matrix(&a)?;
        Ok(Self::wrap(Node::Diag { a, inner }, 3))
    }

    pub fn scalar(inner: ScalarKernel) -> Self {
        Self::wrap(Node::Scalar(inner), 1)
    }

    pub fn sum(terms: Vec<KernelExpr>) -> Result<Self> {
        let dim = same_dim("sum", &terms)?;
        Ok(Self::wrap(Node::Sum(terms), dim))
    }

    pub fn product(a: KernelExpr, b: KernelExpr) -> Result<Self> {
        let dim = same_dim("product", &[a.clone(), b.clone()])?;
        Ok(Self::wrap(Node::Product(a, b), dim))
    }

    pub fn scale(c: f64, inner: KernelExpr) -> Result<Self> {
        positive("scale factor", c)?;
        let dim = inner.dim;
        Ok(Self::wrap(Node::Scale { c, inner }, dim))
    }

    /// `R S k(x, y) S^T R^T` for an orthonormal `R` and positive diagonal `S`.
    pub fn anisotropic(rotation: Matrix3<f64>, scales: Vector3<f64>, inner: KernelExpr) -> Result<Self> {
        if inner.dim != 3 {
            return Err(Error::DimensionMismatch("anisotropic needs a 3-dimensional inner kernel".into()));
        }
        validate_rotation(&rotation)?;
        for s in scales.iter() {
            positive("anisotropic scale", *s)?;
        }
        Ok(Self::wrap(
            Node::Anisotropic {
                rotation,
                scales,
                inner,
            },
            3,
        ))
    }

    pub fn localize(weight: WeightFn, inner: KernelExpr) -> Self {
        let dim = inner.dim;
        Self::wrap(Node::Localize { weight, inner }, dim)
    }

    /// Spatially varying kernel; the weights must sum to one (to 1e-6) at every check point.
    pub fn spatially_varying(regions: Vec<(WeightFn, KernelExpr)>, check_points: &[Point]) -> Result<Self> {
        if regions.is_empty() {
            return Err(Error::invalid("spatially varying kernel needs at least one region"));
        }
        let kernels: Vec<KernelExpr> = regions.iter().map(|(_, k)| k.clone()).collect();
        let dim = same_dim("spatially_varying", &kernels)?;
        for p in check_points {
            let total: f64 = regions.iter().map(|(w, _)| w.eval(p)).sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "region weights sum to {total} at {p}, not a partition of unity"
                )));
            }
        }
        Ok(Self::wrap(Node::SpatiallyVarying(regions), dim))
    }

    pub fn empirical(kernel: Arc<EmpiricalKernel>) -> Self {
        Self::wrap(Node::Empirical(kernel), 3)
    }

    pub fn posterior(kernel: Arc<PosteriorKernel>) -> Self {
        let dim = kernel.output_dim();
        Self::wrap(Node::Posterior(kernel), dim)
    }

    /// The first empirical node in the tree, if any (its mean is the natural model mean).
    pub fn find_empirical(&self) -> Option<Arc<EmpiricalKernel>> {
        match self.node() {
            Node::Empirical(e) => Some(e.clone()),
            Node::Sum(ts) => ts.iter().find_map(|t| t.find_empirical()),
            Node::Product(a, b) => a.find_empirical().or_else(|| b.find_empirical()),
            Node::Scale { inner, .. } | Node::Anisotropic { inner, .. } | Node::Localize { inner, .. } => {
                inner.find_empirical()
            }
            Node::SpatiallyVarying(rs) => rs.iter().find_map(|(_, k)| k.find_empirical()),
            Node::Posterior(p) => p.prior().find_empirical(),
            _ => None,
        }
    }

    /// Kernel matrix value; for `d = 1` only the `(0, 0)` entry is nonzero.
    pub fn eval(&self, x: &Point, y: &Point) -> Matrix3<f64> {
        let m = match self.node() {
            Node::Gauss { s, sigma } => {
                Matrix3::identity() * (s * (-(x - y).norm_squared() / (sigma * sigma)).exp())
            }
            Node::Multiscale { s, sigma, levels } => {
                let d2 = (x - y).norm_squared();
                let v: f64 = (1..=*levels)
                    .map(|i| {
                        let fi = i as f64;
                        let bw = sigma / fi;
                        (s / fi) * (-d2 / (bw * bw)).exp()
                    })
                    .sum();
                Matrix3::identity() * v
            }
            Node::Diag { a, inner } => a * inner.eval(x, y),
            Node::Scalar(inner) => {
                let mut m = Matrix3::zeros();
                m[(0, 0)] = inner.eval(x, y);
                m
            }
            Node::Sum(terms) => terms.iter().map(|t| t.eval(x, y)).sum(),
            Node::Product(a, b) => a.eval(x, y).component_mul(&b.eval(x, y)),
            Node::Scale { c, inner } => inner.eval(x, y) * *c,
            Node::Anisotropic {
                rotation,
                scales,
                inner,
            } => {
                let rs = rotation * Matrix3::from_diagonal(scales);
                rs * inner.eval(x, y) * rs.transpose()
            }
            Node::Localize { weight, inner } => inner.eval(x, y) * (weight.eval(x) * weight.eval(y)),
            Node::SpatiallyVarying(regions) => regions
                .iter()
                .map(|(w, k)| {
                    let wx = w.eval(x);
                    let wy = w.eval(y);
                    if wx == 0.0 || wy == 0.0 {
                        Matrix3::zeros()
                    } else {
                        k.eval(x, y) * (wx * wy)
                    }
                })
                .sum(),
            Node::Empirical(e) => e.eval(x, y),
            Node::Posterior(p) => p.eval(x, y),
        };
        if self.dim == 1 {
            let mut out = Matrix3::zeros();
            out[(0, 0)] = m[(0, 0)];
            out
        } else {
            m
        }
    }

    pub fn is_stationary(&self) -> bool {
        match self.node() {
            Node::Gauss { .. } | Node::Multiscale { .. } | Node::Diag { .. } | Node::Scalar(_) => true,
            Node::Sum(ts) => ts.iter().all(|t| t.is_stationary()),
            Node::Product(a, b) => a.is_stationary() && b.is_stationary(),
            Node::Scale { inner, .. } | Node::Anisotropic { inner, .. } => inner.is_stationary(),
            Node::Localize { weight, inner } => matches!(weight, WeightFn::One) && inner.is_stationary(),
            Node::SpatiallyVarying(_) | Node::Empirical(_) | Node::Posterior(_) => false,
        }
    }
}

impl MatrixKernel for KernelExpr {
    fn output_dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &Point, y: &Point) -> Matrix3<f64> {
        KernelExpr::eval(self, x, y)
    }

    fn is_stationary(&self) -> bool {
        KernelExpr::is_stationary(self)
    }
}

/// Block Gram matrix `K[(i, a), (j, b)] = k(x_i, x_j)[a, b]` of size `n d x n d`.
pub fn gram_matrix(kernel: &dyn MatrixKernel, points: &[Point]) -> DMatrix<f64> {
    let d = kernel.output_dim();
    let n = points.len();
    let rows: Vec<Vec<Matrix3<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| (i..n).map(|j| kernel.eval(&points[i], &points[j])).collect())
        .collect();
    let mut k = DMatrix::zeros(n * d, n * d);
    for (i, row) in rows.iter().enumerate() {
        for (off, block) in row.iter().enumerate() {
            let j = i + off;
            for a in 0..d {
                for b in 0..d {
                    k[(i * d + a, j * d + b)] = block[(a, b)];
                    k[(j * d + b, i * d + a)] = block[(a, b)];
                }
            }
        }
    }
    k
}

/// Cross-covariance `C[(i, a), (j, b)] = k(x_i, y_j)[a, b]`, size `|xs| d x |ys| d`.
pub fn cross_matrix(kernel: &dyn MatrixKernel, xs: &[Point], ys: &[Point]) -> DMatrix<f64> {
    let d = kernel.output_dim();
    let rows: Vec<Vec<Matrix3<f64>>> = xs
        .par_iter()
        .map(|x| ys.iter().map(|y| kernel.eval(x, y)).collect())
        .collect();
    let mut c = DMatrix::zeros(xs.len() * d, ys.len() * d);
    for (i, row) in rows.iter().enumerate() {
        for (j, block) in row.iter().enumerate() {
            for a in 0..d {
                for b in 0..d {
                    c[(i * d + a, j * d + b)] = block[(a, b)];
                }
            }
        }
    }
    c
}

pub(crate) fn validate_diag_matrix(a: &Matrix3<f64>) -> Result<()> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("diag matrix has non-finite entries"));
    }
    let scale = a.amax().max(1.0);
    if (a - a.transpose()).amax() > 1e-12 * scale {
        return Err(Error::invalid("diag matrix must be symmetric"));
    }
    let min_eig = SymmetricEigen::new(*a).eigenvalues.min();
    if min_eig < -1e-12 * scale {
        return Err(Error::invalid(format!(
            "diag matrix must be positive semi-definite (smallest eigenvalue {min_eig:e})"
        )));
    }
    Ok(())
}

pub(crate) fn validate_rotation(r: &Matrix3<f64>) -> Result<()> {
    let defect = (r.transpose() * r - Matrix3::identity()).norm();
    if defect <= 1e-8 {
        Ok(())
    } else {
        Err(Error::invalid(format!("rotation is not orthonormal (|R^T R - I| = {defect:e})")))
    }
}

fn positive(what: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} must be positive, got {v}")))
    }
}

fn finite_vec(what: &str, v: &Vector) -> Result<()> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} must be finite")))
    }
}

fn same_dim(what: &str, terms: &[KernelExpr]) -> Result<usize> {
    let first = terms
        .first()
        .ok_or_else(|| Error::invalid(format!("{what} needs at least one operand")))?;
    if terms.iter().any(|t| t.dim != first.dim) {
        return Err(Error::DimensionMismatch(format!("{what} operands have different output dimensions")));
    }
    Ok(first.dim)
}
