//! Functional dynamic linear model for the innovation covariance,
//! `K = Phi Sigma_e Phi' + s2_eta I`, its closed-form precision, the Gibbs
//! blocks for factors, ordered factor precisions, nugget and loading curves,
//! and out-of-grid kriging.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_jitter, std_normal_vec, symmetrize};
use crate::special::{sample_gamma, sample_truncated_gamma};

/// Nugget used when `s2_eta` is fixed rather than sampled.
pub const FIXED_NUGGET: f64 = 1e-6;
/// Lower bound on loading-curve smoothing precisions.
pub const LAMBDA_FLOOR: f64 = 1e-8;
const ORTHO_TOL: f64 = 1e-8;
const PRIOR_AB: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdlmCovariance {
    /// Basis coefficients of the loading curves, `J_phi x J`.
    pub xi: DMatrix<f64>,
    /// Loading curves on the grid, `M x J` (= `B_phi Xi`).
    pub phi: DMatrix<f64>,
    /// Factor variances, strictly decreasing.
    pub sigma2: DVector<f64>,
    pub sigma_eta2: f64,
    /// Smoothing precisions of the loading curves.
    pub lambda_phi: DVector<f64>,
}

impl FdlmCovariance {
    /// Covariance with loadings given directly on the grid (identity basis).
    pub fn from_loadings(phi: DMatrix<f64>, sigma2: DVector<f64>, sigma_eta2: f64) -> Result<Self> {
        let j = phi.ncols();
        let f = Self {
            xi: phi.clone(),
            phi,
            sigma2,
            sigma_eta2,
            lambda_phi: DVector::from_element(j, 1.0),
        };
        f.validate()?;
        Ok(f)
    }

    pub fn grid_len(&self) -> usize {
        self.phi.nrows()
    }

    pub fn n_factors(&self) -> usize {
        self.phi.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.n_factors();
        if self.sigma2.len() != j {
            return Err(Error::Dimension(format!("{} variances for {j} factors", self.sigma2.len())));
        }
        if !(self.sigma_eta2 > 0.0) {
            return Err(Error::InvalidParameter(format!("nugget {}", self.sigma_eta2)));
        }
        if self.sigma2.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParameter("factor variances must be positive".into()));
        }
        if self.sigma2.as_slice().windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidParameter("factor variances must be strictly decreasing".into()));
        }
        let gram = self.phi.transpose() * &self.phi;
        let dev = (gram - DMatrix::identity(j, j)).amax();
        if dev > ORTHO_TOL {
            return Err(Error::InvalidParameter(format!("loadings not orthonormal (max dev {dev:.2e})")));
        }
        Ok(())
    }

    /// `Sigma_tilde = diag(s_j^2 / (s2_eta + s_j^2))`.
    pub fn sigma_tilde(&self) -> DVector<f64> {
        self.sigma2.map(|s| s / (self.sigma_eta2 + s))
    }

    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        self.validate()?;
        let m = self.grid_len();
        let scaled = DMatrix::from_fn(m, self.n_factors(), |i, j| self.phi[(i, j)] * self.sigma2[j]);
        let mut k = scaled * self.phi.transpose();
        for i in 0..m {
            k[(i, i)] += self.sigma_eta2;
        }
        symmetrize(&mut k);
        Ok(k)
    }

    /// `K^{-1} = s2_eta^{-1} (I - Phi Sigma_tilde Phi')`, no inversions.
    pub fn precision(&self) -> Result<DMatrix<f64>> {
        self.validate()?;
        let m = self.grid_len();
        let st = self.sigma_tilde();
        let scaled = DMatrix::from_fn(m, self.n_factors(), |i, j| self.phi[(i, j)] * st[j]);
        let mut p = -(scaled * self.phi.transpose());
        for i in 0..m {
            p[(i, i)] += 1.0;
        }
        p /= self.sigma_eta2;
        symmetrize(&mut p);
        Ok(p)
    }

    /// Re-orthonormalize `Phi = B Xi` (QR on the grid), keeping the sign convention.
    pub fn orthonormalize(&mut self, bphi: &DMatrix<f64>) -> Result<()> {
        let phi = bphi * &self.xi;
        let qr = phi.qr();
        let r = qr.r();
        let rinv = r
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::RankDeficient("loading curves are collinear".into()))?;
        self.xi = &self.xi * rinv;
        self.phi = bphi * &self.xi;
        for j in 0..self.n_factors() {
            fix_sign(&mut self.xi, &mut self.phi, j);
        }
        Ok(())
    }
}

/// Make the largest-magnitude entry of loading `j` positive.
fn fix_sign(xi: &mut DMatrix<f64>, phi: &mut DMatrix<f64>, j: usize) {
    let col = phi.column(j);
    let (imax, _) = col
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |acc, (i, &v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc });
    if col[imax] < 0.0 {
        phi.column_mut(j).neg_mut();
        xi.column_mut(j).neg_mut();
    }
}

/// Diagonal posterior variance `A_e` and the means `A_e a_{e_t}` for all times.
pub fn factor_conditional(fdlm: &FdlmCovariance, eps: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let prec_eta = 1.0 / fdlm.sigma_eta2;
    let var = fdlm.sigma2.map(|s| 1.0 / (prec_eta + 1.0 / s));
    let mut mean = fdlm.phi.transpose() * eps * prec_eta;
    for j in 0..var.len() {
        let v = var[j];
        mean.row_mut(j).scale_mut(v);
    }
    (var, mean)
}

/// Draw all factor scores `e_t` (columns of the returned `J x T` matrix).
pub fn sample_factors<R: Rng + ?Sized>(fdlm: &FdlmCovariance, eps: &DMatrix<f64>, rng: &mut R) -> DMatrix<f64> {
    let (var, mut mean) = factor_conditional(fdlm, eps);
    for t in 0..mean.ncols() {
        for j in 0..var.len() {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            mean[(j, t)] += var[j].sqrt() * z;
        }
    }
    mean
}

/// Shape and rate of the ordered-precision draws: `(shape_J, rate_J)` for the last
/// factor and `(shape, rate_j)` for the truncated draws of `j < J`.
pub fn ordered_precision_params(e: &DMatrix<f64>) -> Vec<(f64, f64)> {
    let (j, tn) = e.shape();
    (0..j)
        .map(|k| {
            let ss: f64 = e.row(k).iter().map(|v| v * v).sum();
            if k + 1 == j {
                (PRIOR_AB + tn as f64 / 2.0, PRIOR_AB + ss / 2.0)
            } else {
                ((tn as f64 - 1.0) / 2.0, ss / 2.0)
            }
        })
        .collect()
}

/// Draw `s_J^{-2}` from its Gamma conditional, then `s_j^{-2}` for `j = J-1..1`
/// from the Gamma truncated above at `s_{j+1}^{-2}`. Returns precisions.
pub fn sample_ordered_precisions<R: Rng + ?Sized>(e: &DMatrix<f64>, rng: &mut R) -> Result<DVector<f64>> {
    let (j, tn) = e.shape();
    if j == 0 {
        return Ok(DVector::zeros(0));
    }
    if j > 1 && tn < 2 {
        return Err(Error::InsufficientData("ordered precisions need T >= 2".into()));
    }
    let params = ordered_precision_params(e);
    let mut prec = DVector::zeros(j);
    let (s, r) = params[j - 1];
    prec[j - 1] = sample_gamma(rng, s, r)?;
    for k in (0..j - 1).rev() {
        let hi = prec[k + 1];
        let (s, r) = params[k];
        let mut x = if r < 1e-300 {
            // flat likelihood: density proportional to x^{s-1} on (0, hi)
            hi * rng.random::<f64>().powf(1.0 / s)
        } else {
            sample_truncated_gamma(rng, s, r, 0.0, hi)?
        };
        if x >= hi {
            x = hi * (1.0 - 1e-12);
        }
        prec[k] = x;
    }
    Ok(prec)
}

/// Shape and rate of the nugget precision full conditional.
pub fn nugget_params(eps: &DMatrix<f64>, phi: &DMatrix<f64>, e: &DMatrix<f64>) -> (f64, f64) {
    let resid = eps - phi * e;
    let ss: f64 = resid.iter().map(|v| v * v).sum();
    (PRIOR_AB + eps.len() as f64 / 2.0, PRIOR_AB + ss / 2.0)
}

pub fn sample_nugget<R: Rng + ?Sized>(eps: &DMatrix<f64>, phi: &DMatrix<f64>, e: &DMatrix<f64>, rng: &mut R) -> Result<f64> {
    let (s, r) = nugget_params(eps, phi, e);
    sample_gamma(rng, s, r)
}

/// Unconstrained full conditional of loading coefficients `xi_j`:
/// returns the covariance `A` and mean `A a`.
pub fn flc_conditional(
    fdlm: &FdlmCovariance,
    bphi: &DMatrix<f64>,
    e: &DMatrix<f64>,
    eps: &DMatrix<f64>,
    j: usize,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let jf = bphi.ncols();
    let prec_eta = 1.0 / fdlm.sigma_eta2;
    let ej = e.row(j).transpose();
    let ss = ej.dot(&ej);
    let mut prec = bphi.transpose() * bphi * (prec_eta * ss);
    for i in 0..jf {
        prec[(i, i)] += if i < 2 { 1.0 / crate::basis::UNPENALIZED_VAR } else { fdlm.lambda_phi[j] };
    }
    // sum_t e_jt (eps_t - sum_{k != j} phi_k e_kt)
    let mut target = eps * &ej;
    for k in 0..fdlm.n_factors() {
        if k != j {
            let w = e.row(k).dot(&e.row(j));
            target -= fdlm.phi.column(k) * w;
        }
    }
    let a = bphi.transpose() * target * prec_eta;
    let chol = cholesky_jitter(&prec)?;
    let cov = chol.inverse();
    let mean = &cov * a;
    Ok((cov, mean))
}

/// Draw the loading curves in random order, each conditioned on orthogonality to
/// the others, normalized to unit length, and its smoothing precision.
pub fn sample_flcs<R: Rng + ?Sized>(
    fdlm: &mut FdlmCovariance,
    bphi: &DMatrix<f64>,
    e: &DMatrix<f64>,
    eps: &DMatrix<f64>,
    rng: &mut R,
) -> Result<()> {
    let nj = fdlm.n_factors();
    let jf = bphi.ncols();
    if nj > jf || nj > bphi.nrows() {
        return Err(Error::RankDeficient(format!("{nj} factors exceed basis dimension {jf}")));
    }
    let mut order: Vec<usize> = (0..nj).collect();
    order.shuffle(rng);
    for &j in &order {
        let (cov, mean) = flc_conditional(fdlm, bphi, e, eps, j)?;
        let l = cholesky_jitter(&cov)?.l();
        let mut xi = &mean + l * std_normal_vec(rng, jf);
        if nj > 1 {
            // constraints (B xi_k)' B xi = 0 for k != j
            let others: Vec<usize> = (0..nj).filter(|&k| k != j).collect();
            let lmat = DMatrix::from_fn(others.len(), jf, |r, c| {
                fdlm.phi.column(others[r]).dot(&bphi.column(c))
            });
            let al = &cov * lmat.transpose();
            let lal = &lmat * &al;
            let chol = nalgebra::Cholesky::new(lal)
                .ok_or_else(|| Error::RankDeficient("loading constraints are degenerate".into()))?;
            let corr = &al * chol.solve(&(&lmat * &xi));
            xi -= corr;
        }
        let norm = (bphi * &xi).norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Numerical("degenerate loading draw".into()));
        }
        xi /= norm;
        fdlm.xi.set_column(j, &xi);
        let phij = bphi * &xi;
        fdlm.phi.set_column(j, &phij);
        fix_sign(&mut fdlm.xi, &mut fdlm.phi, j);
        if jf > 3 {
            let ss: f64 = fdlm.xi.column(j).iter().skip(2).map(|v| v * v).sum();
            fdlm.lambda_phi[j] = sample_smoothing_precision(rng, jf, ss)?;
        }
    }
    Ok(())
}

/// `Gamma((J - 3)/2, ss/2)` restricted to `lambda > 1e-8`.
pub fn sample_smoothing_precision<R: Rng + ?Sized>(rng: &mut R, dim: usize, ss: f64) -> Result<f64> {
    let shape = (dim as f64 - 3.0) / 2.0;
    let rate = (ss / 2.0).max(1e-300);
    sample_truncated_gamma(rng, shape, rate, LAMBDA_FLOOR, f64::INFINITY)
}

/// Kriging at an off-grid point: Gaussian mean and variance of `mu_t(tau*)`.
///
/// `phi_star` are the loadings at `tau*`, `psi_star[l]` the kernel row
/// `psi_l(tau*, tau_k)` over the grid, `psi_blocks[l]` the grid kernels `Psi_l`,
/// `weights` the quadrature weights and `mu_lags[l]` the state `mu_{t-l-1}`.
pub fn krige(
    fdlm: &FdlmCovariance,
    phi_star: &DVector<f64>,
    psi_star: &[DVector<f64>],
    psi_blocks: &[DMatrix<f64>],
    weights: &[f64],
    mu_t: &DVector<f64>,
    mu_lags: &[DVector<f64>],
) -> Result<(f64, f64)> {
    let m = fdlm.grid_len();
    let p = psi_blocks.len();
    if psi_star.len() != p || mu_lags.len() < p || phi_star.len() != fdlm.n_factors() || weights.len() != m {
        return Err(Error::Dimension("kriging inputs".into()));
    }
    let mut pred_star = 0.0;
    let mut pred_grid = DVector::zeros(m);
    for l in 0..p {
        let qmu = DVector::from_iterator(m, weights.iter().zip(mu_lags[l].iter()).map(|(w, v)| w * v));
        pred_star += psi_star[l].dot(&qmu);
        pred_grid += &psi_blocks[l] * &qmu;
    }
    let st = fdlm.sigma_tilde();
    let proj = fdlm.phi.transpose() * (mu_t - pred_grid);
    let mean = pred_star + phi_star.component_mul(&st).dot(&proj);
    let var = fdlm.sigma_eta2 + fdlm.sigma_eta2 * phi_star.component_mul(&st).dot(phi_star);
    Ok((mean, var))
}

/// Smallest number of factors whose squared singular values explain 95% of the
/// energy of the innovation matrix (`M x T`, one column per time).
pub fn select_n_factors(eps: &DMatrix<f64>) -> Result<usize> {
    select_n_factors_at(eps, 0.95)
}

pub fn select_n_factors_at(eps: &DMatrix<f64>, level: f64) -> Result<usize> {
    if eps.ncols() < 2 {
        return Err(Error::InsufficientData("need at least two innovation vectors".into()));
    }
    let sv = eps.clone().svd(false, false).singular_values;
    let total: f64 = sv.iter().map(|s| s * s).sum();
    if !(total > 0.0) {
        return Err(Error::InsufficientData("innovation matrix is zero".into()));
    }
    let mut sorted: Vec<f64> = sv.iter().map(|s| s * s).collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut acc = 0.0;
    for (k, s) in sorted.iter().enumerate() {
        acc += s;
        if acc / total >= level - 1e-12 {
            return Ok(k + 1);
        }
    }
    Ok(sorted.len())
}
