//! Closed-form eigenpairs of the 1D Gaussian kernel under a Gaussian measure.
//!
//! For `k(x, y) = exp(-(x - y)^2 / sigma^2)` and the measure `rho = N(0, s2)`, put
//!
//! ```text
//! a = 1 / (4 s2),  b = 1 / sigma^2,  c = sqrt(a^2 + 2ab),  A = a + b + c,  B = b / A
//! ```
//!
//! Then `phi_i(x) = exp(-(c - a) x^2) H_i(sqrt(2c) x)` with physicists' Hermite
//! polynomials `H_i`, and the eigenvalues decay geometrically with ratio `B`.
//! [`AnalyticSpectrum::eigenvalue`] returns `sqrt(pi / A) B^i`, the eigenvalue of the
//! operator integrated against the unnormalized weight `exp(-x^2 / (2 s2))`; the
//! probability measure `rho` gives the same values divided by its mass `sqrt(2 pi s2)`,
//! i.e. `sqrt(2a / A) B^i`.
//!
//! Indices start at 0, the constant-sign eigenfunction. Hermite values come from a
//! normalized three-term recurrence with running rescaling, which stays accurate for
//! `i <= 60`.

use serde::Serialize;

use crate::geometry::Point;
use crate::linalg::symmetric_eigen;
use crate::lowrank::LowRankGp;
use crate::{Error, Result};
use nalgebra::DMatrix;

/// Highest supported eigenfunction index.
pub const MAX_INDEX: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnalyticSpectrum {
    pub sigma: f64,
    pub s2: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub big_a: f64,
    pub big_b: f64,
}

impl AnalyticSpectrum {
    pub fn new(sigma: f64, s2: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite() && s2 > 0.0 && s2.is_finite()) {
            return Err(Error::invalid(format!(
                "kernel bandwidth and measure variance must be positive, got {sigma} and {s2}"
            )));
        }
        let a = 1.0 / (4.0 * s2);
        let b = 1.0 / (sigma * sigma);
        let c = (a * a + 2.0 * a * b).sqrt();
        let big_a = a + b + c;
        Ok(AnalyticSpectrum {
            sigma,
            s2,
            a,
            b,
            c,
            big_a,
            big_b: b / big_a,
        })
    }

    /// `sqrt(pi / A) B^i`
    pub fn eigenvalue(&self, i: usize) -> f64 {
        (std::f64::consts::PI / self.big_a).sqrt() * self.big_b.powi(i as i32)
    }

    /// Mass `sqrt(2 pi s2)` of the unnormalized Gaussian weight.
    pub fn measure_mass(&self) -> f64 {
        (2.0 * std::f64::consts::PI * self.s2).sqrt()
    }

    /// Eigenvalue under the probability measure `N(0, s2)`: `sqrt(2a / A) B^i`.
    pub fn probability_eigenvalue(&self, i: usize) -> f64 {
        self.eigenvalue(i) / self.measure_mass()
    }

    /// `sum_i lambda_i = sqrt(pi / A) / (1 - B)`
    pub fn total_variance(&self) -> f64 {
        (std::f64::consts::PI / self.big_a).sqrt() / (1.0 - self.big_b)
    }

    fn check_index(i: usize) -> Result<()> {
        if i > MAX_INDEX {
            return Err(Error::invalid(format!(
                "eigenfunction index {i} exceeds the supported range 0..={MAX_INDEX}"
            )));
        }
        Ok(())
    }

    /// `exp(-(c - a) x^2) H_i(sqrt(2c) x) / sqrt(2^i i!)` as `(mantissa, log_scale)`.
    fn scaled_hermite(&self, i: usize, x: f64) -> (f64, f64) {
        let z = (2.0 * self.c).sqrt() * x;
        let mut log_scale = -(self.c - self.a) * x * x;
        let mut prev = 0.0;
        let mut cur = 1.0;
        for k in 0..i {
            let kf = k as f64;
            let next = (2.0 / (kf + 1.0)).sqrt() * z * cur - (kf / (kf + 1.0)).sqrt() * prev;
            prev = cur;
            cur = next;
            let m = cur.abs().max(prev.abs());
            if m > 1e100 {
                prev /= m;
                cur /= m;
                log_scale += m.ln();
            }
        }
        (cur, log_scale)
    }

    /// The eigenfunction as written, `exp(-(c - a) x^2) H_i(sqrt(2c) x)`.
    pub fn eigenfunction(&self, i: usize, x: f64) -> Result<f64> {
        Self::check_index(i)?;
        let (m, log_scale) = self.scaled_hermite(i, x);
        let log_norm = 0.5 * (i as f64 * std::f64::consts::LN_2 + ln_factorial(i));
        Ok(m * (log_scale + log_norm).exp())
    }

    /// The eigenfunction scaled to unit norm in `L2(N(0, s2))`.
    pub fn normalized_eigenfunction(&self, i: usize, x: f64) -> Result<f64> {
        Self::check_index(i)?;
        let (m, log_scale) = self.scaled_hermite(i, x);
        Ok(m * (log_scale + 0.25 * (self.c / self.a).ln()).exp())
    }
}

fn ln_factorial(i: usize) -> f64 {
    (2..=i).map(|k| (k as f64).ln()).sum()
}

/// Gauss-Hermite rule for `N(0, s2)` with `n` nodes (Golub-Welsch); weights sum to one.
pub fn gauss_hermite(n: usize, s2: f64) -> Vec<(f64, f64)> {
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = symmetric_eigen(jacobi);
    let s = s2.sqrt();
    let mut rule: Vec<(f64, f64)> = (0..n).map(|k| (s * eig.values[k], eig.vectors[(0, k)].powi(2))).collect();
    rule.sort_by(|p, q| p.0.total_cmp(&q.0));
    rule
}

/// Per-index agreement between the closed form and a Nystrom model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IndexComparison {
    pub i: usize,
    pub lambda_analytic: f64,
    /// Nystrom eigenvalue converted to the same normalization as `lambda_analytic`.
    pub lambda_nystrom: f64,
    pub rel_err: f64,
    /// `L2` distance of the sign-aligned, unit-norm eigenfunctions on the Nystrom points.
    pub func_err: f64,
}

/// Compares the first `i_max + 1` eigenpairs of a 1D model built on `N(0, s2)` with the
/// closed form. Indices beyond the model rank (or the supported range) are skipped.
pub fn compare_to_nystrom(spec: &AnalyticSpectrum, gp: &LowRankGp, i_max: usize) -> Result<Vec<IndexComparison>> {
    if gp.dim() != 1 {
        return Err(Error::DimensionMismatch("the analytic comparison needs a 1-dimensional model".into()));
    }
    let points: &[Point] = gp.nystrom_points();
    let w = gp.quadrature_weights();
    let (_, basis) = gp.mean_and_basis(points);
    let count = (i_max + 1).min(gp.rank()).min(MAX_INDEX + 1);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let nys: Vec<f64> = (0..points.len()).map(|l| basis[(3 * l, i)]).collect();
        let ana: Vec<f64> = points
            .iter()
            .map(|p| spec.normalized_eigenfunction(i, p.x))
            .collect::<Result<_>>()?;
        let norm = |v: &[f64]| v.iter().zip(w).map(|(a, wl)| wl * a * a).sum::<f64>().sqrt();
        let (nn, na) = (norm(&nys), norm(&ana));
        let inner: f64 = nys.iter().zip(&ana).zip(w).map(|((a, b), wl)| wl * a * b).sum::<f64>() / (nn * na);
        let sign = if inner < 0.0 { -1.0 } else { 1.0 };
        let func_err = nys
            .iter()
            .zip(&ana)
            .zip(w)
            .map(|((a, b), wl)| wl * (a / nn - sign * b / na).powi(2))
            .sum::<f64>()
            .sqrt();
        let lambda_analytic = spec.eigenvalue(i);
        let lambda_nystrom = gp.eigenvalues()[i] * spec.measure_mass();
        out.push(IndexComparison {
            i,
            lambda_analytic,
            lambda_nystrom,
            rel_err: (lambda_nystrom - lambda_analytic).abs() / lambda_analytic,
            func_err,
        });
    }
    Ok(out)
}
