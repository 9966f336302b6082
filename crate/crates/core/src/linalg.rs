//! Dense linear-algebra helpers shared by the low-rank builder, regression and the
//! shape-model code.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::{Error, Result};

/// Rows per parallel block in [`par_matmul`]; keeps each product cache-sized.
const ROW_BLOCK: usize = 64;

/// Eigenpairs sorted by descending eigenvalue; `vectors` holds them column-wise.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigenPairs {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Keeps the leading `r` pairs.
    pub fn truncate(mut self, r: usize) -> Self {
        let r = r.min(self.values.len());
        self.values.truncate(r);
        self.vectors = self.vectors.columns(0, r).into_owned();
        self
    }

    /// Flips every eigenvector so its largest-magnitude entry is positive.
    pub fn canonicalize_signs(&mut self) {
        for mut col in self.vectors.column_iter_mut() {
            let pivot = col
                .iter()
                .copied()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
                .map(|(_, v)| v)
                .unwrap_or(0.0);
            if pivot < 0.0 {
                col.neg_mut();
            }
        }
    }
}

/// Full eigendecomposition of a symmetric matrix, sorted descending.
pub fn symmetric_eigen(m: DMatrix<f64>) -> EigenPairs {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    EigenPairs { values, vectors }
}

/// `a * b`, computed in independent row blocks on the rayon pool. Every output entry is
/// produced by the same sequential kernel regardless of thread count.
pub fn par_matmul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), b.nrows(), "par_matmul shape mismatch");
    let rows = a.nrows();
    let blocks: Vec<DMatrix<f64>> = (0..rows.div_ceil(ROW_BLOCK))
        .into_par_iter()
        .map(|blk| {
            let start = blk * ROW_BLOCK;
            let len = ROW_BLOCK.min(rows - start);
            a.rows(start, len) * b
        })
        .collect();
    let mut out = DMatrix::zeros(rows, b.ncols());
    for (blk, m) in blocks.into_iter().enumerate() {
        out.rows_mut(blk * ROW_BLOCK, m.nrows()).copy_from(&m);
    }
    out
}

/// Randomized range finder settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RsvdOptions {
    pub oversampling: usize,
    pub power_iterations: usize,
}

impl Default for RsvdOptions {
    fn default() -> Self {
        RsvdOptions {
            oversampling: 10,
            power_iterations: 2,
        }
    }
}

/// Matrices at most this size are always decomposed densely.
const DENSE_LIMIT: usize = 400;

/// Leading `rank` eigenpairs of a symmetric positive semi-definite matrix.
///
/// Uses a Gaussian sketch with `oversampling` extra columns, `power_iterations` rounds of
/// subspace iteration with QR re-orthonormalization, and a Rayleigh-Ritz step. Falls back
/// to the dense solver when the sketch would cover most of the matrix.
pub fn leading_eigenpairs(m: &DMatrix<f64>, rank: usize, opts: RsvdOptions, seed: u64) -> Result<EigenPairs> {
    let n = m.nrows();
    if rank == 0 || n == 0 {
        return Err(Error::invalid("leading_eigenpairs needs rank >= 1 and a nonempty matrix"));
    }
    let width = (rank + opts.oversampling).min(n);
    let pairs = if n <= DENSE_LIMIT || 2 * width >= n {
        symmetric_eigen(m.clone())
    } else {
        randomized_eigen(m, width, opts.power_iterations, seed)
    };
    if pairs.values.iter().any(|v| !v.is_finite()) || pairs.vectors.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("eigensolver produced non-finite values"));
    }
    Ok(pairs.truncate(rank))
}

/// Halko-style randomized eigensolver; `width` includes the oversampling.
pub fn randomized_eigen(m: &DMatrix<f64>, width: usize, power_iterations: usize, seed: u64) -> EigenPairs {
    let n = m.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = DMatrix::from_fn(n, width, |_, _| StandardNormal.sample(&mut rng));
    let mut q = par_matmul(m, &omega).qr().q();
    // One power iteration applies `M M^T = M^2`, re-orthonormalizing after each product.
    for _ in 0..2 * power_iterations {
        q = par_matmul(m, &q).qr().q();
    }
    let mq = par_matmul(m, &q);
    let mut small = q.transpose() * mq;
    small = (&small + small.transpose()) * 0.5;
    let inner = symmetric_eigen(small);
    EigenPairs {
        values: inner.values,
        vectors: q * inner.vectors,
    }
}

/// Cholesky factorization retrying with diagonal jitter `1e-10 * trace`, growing tenfold,
/// for at most three extra attempts. Returns the factor and the jitter used.
pub fn cholesky_with_jitter(m: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok((c, 0.0));
    }
    let trace = m.trace().abs().max(f64::MIN_POSITIVE);
    let mut jitter = 1e-10 * trace;
    for _ in 0..3 {
        let mut jittered = m.clone();
        for i in 0..m.nrows() {
            jittered[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(jittered) {
            return Ok((c, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::numerical(format!(
        "Cholesky factorization failed even with jitter {:e}; the covariance is not positive semi-definite",
        jitter / 10.0
    )))
}

/// Least-squares solution of `a x = b` (one column per right-hand side) through the SVD
/// with a relative singular-value cutoff.
pub fn least_squares(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = 1e-12 * smax.max(f64::MIN_POSITIVE);
    svd.solve(b, eps).map_err(|e| Error::numerical(e.to_string()))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}
