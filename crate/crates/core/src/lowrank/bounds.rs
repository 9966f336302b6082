//! Finite-sample accuracy bounds for the Nystrom eigenvalues and eigenspaces.
//!
//! With probability at least `1 - 2 exp(-tau)`, the Nystrom eigenvalues from `n` points
//! are within `2 sqrt(2) kappa sqrt(tau) / sqrt(n)` of the operator eigenvalues (in a
//! suitable enumeration), where `kappa = sup_x k(x, x)`. For a spectral gap
//! `g = lambda_m - lambda_{m+1}` and `n > 128 kappa^2 tau / g^2`, the projection onto the
//! leading `m`-dimensional eigenspace is within `32 kappa^2 tau / (g^2 n)`.

use crate::{Error, Result};

fn check(kappa: f64, tau: f64, n: usize) -> Result<()> {
    if !(kappa > 0.0 && tau > 0.0 && n >= 1) {
        return Err(Error::invalid(format!(
            "bounds need kappa > 0, tau > 0 and n >= 1 (got {kappa}, {tau}, {n})"
        )));
    }
    Ok(())
}

/// `tau` for which the bounds hold with probability `confidence = 1 - 2 exp(-tau)`.
pub fn tau_for_confidence(confidence: f64) -> Result<f64> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::invalid(format!("confidence must lie in (0, 1), got {confidence}")));
    }
    Ok((2.0 / (1.0 - confidence)).ln())
}

/// Uniform bound on the eigenvalue error, `2 sqrt(2) kappa sqrt(tau / n)`.
pub fn eigenvalue_bound(kappa: f64, tau: f64, n: usize) -> Result<f64> {
    check(kappa, tau, n)?;
    Ok(2.0 * std::f64::consts::SQRT_2 * kappa * tau.sqrt() / (n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EigenfunctionBound {
    /// Smallest `n` with `n > 128 kappa^2 tau / gap^2`.
    pub min_n: usize,
    /// `32 kappa^2 tau / (gap^2 n)`; only meaningful when `applicable`.
    pub projection_bound: f64,
    pub applicable: bool,
}

/// Eigenspace projection bound for a spectral gap `gap`.
pub fn eigenfunction_bound(kappa: f64, tau: f64, n: usize, gap: f64) -> Result<EigenfunctionBound> {
    check(kappa, tau, n)?;
    if !(gap > 0.0) {
        return Err(Error::invalid(format!("spectral gap must be positive, got {gap}")));
    }
    let threshold = 128.0 * kappa * kappa * tau / (gap * gap);
    let min_n = threshold.floor() as usize + 1;
    Ok(EigenfunctionBound {
        min_n,
        projection_bound: 32.0 * kappa * kappa * tau / (gap * gap * n as f64),
        applicable: n >= min_n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigenvalue_bound_values() {
        let tau = 200f64.ln();
        assert!((tau_for_confidence(0.99).unwrap() - tau).abs() < 1e-12);
        let b1000 = eigenvalue_bound(1.0, tau, 1000).unwrap();
        assert!((b1000 - 0.206).abs() < 1e-3, "{b1000}");
        let b200 = eigenvalue_bound(1.0, tau, 200).unwrap();
        assert!((b200 - 0.460).abs() < 1e-3, "{b200}");
        let b4000 = eigenvalue_bound(1.0, tau, 4000).unwrap();
        assert!((b4000 - b1000 / 2.0).abs() < 1e-15);
        assert!(eigenvalue_bound(0.0, tau, 10).is_err());
    }

    #[test]
    fn eigenfunction_bound_values() {
        let b = eigenfunction_bound(1.0, 2.0, 1000, 0.5).unwrap();
        assert_eq!(b.min_n, 1025);
        assert!(!b.applicable);
        assert!((b.projection_bound - 0.256).abs() < 1e-12);
        let b = eigenfunction_bound(1.0, 2.0, 1025, 0.5).unwrap();
        assert!(b.applicable);
        assert!(eigenfunction_bound(1.0, 2.0, 10, 0.0).is_err());
    }
}
