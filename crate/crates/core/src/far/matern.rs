//! Parametric Matérn innovation covariance `K = s2 R_rho` for the GP-FAR variant.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::slice::slice_sample;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jitter, log_det_chol};
use crate::special::{matern_corr, sample_gamma};

/// Correlation between the closest pair of grid points at the range upper bound.
pub const MAX_CORRELATION: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternCov {
    pub sigma2: f64,
    /// Smoothness, held fixed.
    pub nu: f64,
    pub rho2: f64,
}

impl MaternCov {
    pub fn correlation(&self, points: &[f64]) -> DMatrix<f64> {
        correlation_matrix(points, self.nu, self.rho2)
    }

    pub fn covariance(&self, points: &[f64]) -> DMatrix<f64> {
        self.correlation(points) * self.sigma2
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.rho2 > 0.0 && self.nu > 0.0) {
            return Err(Error::InvalidParameter(format!("matern {self:?}")));
        }
        Ok(())
    }
}

pub fn correlation_matrix(points: &[f64], nu: f64, rho2: f64) -> DMatrix<f64> {
    let n = points.len();
    DMatrix::from_fn(n, n, |i, j| matern_corr(nu, (points[i] - points[j]).abs() / rho2))
}

/// Largest range for which every pairwise correlation stays below 0.99.
///
/// Correlation decreases with distance, so the binding pair is the closest one.
pub fn range_upper_bound(points: &[f64], nu: f64) -> Result<f64> {
    let dmin = points
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .fold(f64::INFINITY, f64::min);
    if !(dmin.is_finite() && dmin > 0.0) {
        return Err(Error::InvalidGrid("need at least two distinct points".into()));
    }
    // corr(dmin / rho) increases in rho
    let (mut lo, mut hi) = (dmin * 1e-3, dmin);
    while matern_corr(nu, dmin / hi) < MAX_CORRELATION {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if matern_corr(nu, dmin / mid) < MAX_CORRELATION {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 * hi {
            break;
        }
    }
    Ok(lo)
}

/// `log|R|` and `sum_t eps_t' R^{-1} eps_t` for innovations stored as columns.
pub fn quad_terms(points: &[f64], nu: f64, rho2: f64, eps: &DMatrix<f64>) -> Result<(f64, f64)> {
    let r = correlation_matrix(points, nu, rho2);
    let chol = cholesky_jitter(&r)?;
    let z = chol
        .l_dirty()
        .solve_lower_triangular(eps)
        .ok_or_else(|| Error::Numerical("triangular solve".into()))?;
    Ok((log_det_chol(&chol), z.norm_squared()))
}

/// Shape and rate of the conjugate full conditional of `1 / s2`.
pub fn scale_params(quad: f64, n_vectors: usize, m: usize) -> (f64, f64) {
    (1e-3 + (n_vectors * m) as f64 / 2.0, 1e-3 + quad / 2.0)
}

/// One update of `(s2, rho2)` given innovations (`M x T` columns).
pub fn sample_matern<R: Rng + ?Sized>(
    cov: &mut MaternCov,
    points: &[f64],
    upper: f64,
    eps: &DMatrix<f64>,
    rng: &mut R,
) -> Result<()> {
    let (_, quad) = quad_terms(points, cov.nu, cov.rho2, eps)?;
    let (shape, rate) = scale_params(quad, eps.ncols(), points.len());
    cov.sigma2 = 1.0 / sample_gamma(rng, shape, rate)?;
    let n = eps.ncols() as f64;
    let s2 = cov.sigma2;
    let nu = cov.nu;
    let log_density = |rho: f64| {
        if !(rho > 0.0 && rho < upper) {
            return f64::NEG_INFINITY;
        }
        match quad_terms(points, nu, rho, eps) {
            Ok((ld, q)) => -0.5 * n * ld - 0.5 * q / s2,
            Err(_) => f64::NEG_INFINITY,
        }
    };
    cov.rho2 = slice_sample(rng, cov.rho2, log_density, 0.1 * upper, 0.0, upper);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::linspace;

    #[test]
    fn exponential_and_unit_diagonal() {
        let pts = [0.0, 0.2, 0.7];
        let r = correlation_matrix(&pts, 0.5, 0.3);
        assert!((r[(0, 1)] - (-0.2f64 / 0.3).exp()).abs() < 1e-14);
        for nu in [0.5, 1.0, 2.5] {
            let r = correlation_matrix(&pts, nu, 0.1);
            assert!((0..3).all(|i| r[(i, i)] == 1.0));
        }
    }

    #[test]
    fn upper_bound_hits_cap() {
        let pts = linspace(0.0, 1.0, 30);
        for nu in [0.5, 2.5] {
            let u = range_upper_bound(&pts, nu).unwrap();
            let d = pts[1] - pts[0];
            assert!((matern_corr(nu, d / u) - MAX_CORRELATION).abs() < 1e-9);
        }
    }

    #[test]
    fn scale_params_no_innovations() {
        assert_eq!(scale_params(0.0, 0, 10), (1e-3, 1e-3));
    }
}
