//! Mean function, measurement precision and innovation-covariance blocks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{kernels, matern, FarModel, Innovation, ModelState, NuggetMode};
use crate::error::Result;
use crate::fdlm::{
    sample_factors, sample_flcs, sample_nugget, sample_ordered_precisions, sample_smoothing_precision, FIXED_NUGGET,
};
use crate::linalg::{cholesky_jitter, sample_from_precision};
use crate::special::sample_gamma;

const PRIOR_AB: f64 = 1e-3;

/// Posterior precision and linear term of the mean-function coefficients.
pub fn mean_function_conditional(model: &FarModel, state: &ModelState) -> (DMatrix<f64>, DVector<f64>) {
    let m = model.grid_len();
    let mut counts = DVector::<f64>::zeros(m);
    let mut resid = DVector::<f64>::zeros(m);
    for t in 0..model.n_fit {
        let mu_t = &state.states[t];
        for (&i, &y) in model.obs.index[t].iter().zip(model.obs.values[t].iter()) {
            counts[i] += 1.0;
            resid[i] += y - mu_t[i];
        }
    }
    let prec_nu = 1.0 / state.sigma_nu2;
    let b = &model.bphi;
    let weighted = DMatrix::from_fn(m, b.ncols(), |i, j| b[(i, j)] * counts[i]);
    let mut prec = b.transpose() * weighted * prec_nu;
    let prior = model.thin_plate.prior_precision(state.lambda_mu);
    for j in 0..prior.len() {
        prec[(j, j)] += prior[j];
    }
    let lin = b.transpose() * resid * prec_nu;
    (prec, lin)
}

pub fn sample_mean_function<R: Rng + ?Sized>(model: &FarModel, state: &mut ModelState, rng: &mut R) -> Result<()> {
    let (prec, lin) = mean_function_conditional(model, state);
    let (_, draw) = sample_from_precision(rng, &prec, &lin)?;
    state.theta_mu = draw;
    let jm = state.theta_mu.len();
    if jm > 3 {
        let ss: f64 = state.theta_mu.iter().skip(2).map(|v| v * v).sum();
        state.lambda_mu = sample_smoothing_precision(rng, jm, ss)?;
    }
    Ok(())
}

/// Shape and rate of the measurement precision full conditional.
pub fn obs_precision_params(model: &FarModel, state: &ModelState) -> (f64, f64) {
    let mean = model.mean_on_grid(state);
    let mut n = 0usize;
    let mut ss = 0.0;
    for t in 0..model.n_fit {
        let mu_t = &state.states[t];
        for (&i, &y) in model.obs.index[t].iter().zip(model.obs.values[t].iter()) {
            let r = y - mean[i] - mu_t[i];
            ss += r * r;
            n += 1;
        }
    }
    (PRIOR_AB + n as f64 / 2.0, PRIOR_AB + ss / 2.0)
}

pub fn sample_obs_variance<R: Rng + ?Sized>(model: &FarModel, state: &mut ModelState, rng: &mut R) -> Result<()> {
    let (shape, rate) = obs_precision_params(model, state);
    state.sigma_nu2 = 1.0 / sample_gamma(rng, shape, rate)?;
    Ok(())
}

/// Innovations `mu_t - sum_l s_l Psi_l Q mu_{t-l}` as columns, for the
/// likelihood times `p_max..n_fit`.
pub fn innovations(model: &FarModel, state: &ModelState) -> DMatrix<f64> {
    let blocks = kernels::evolution_blocks(&model.kernel, &state.lags, &model.weights);
    let start = model.first_term();
    let m = model.grid_len();
    let cols = model.n_fit.saturating_sub(start);
    let mut eps = DMatrix::zeros(m, cols);
    for (c, t) in (start..model.n_fit).enumerate() {
        let mut e = state.states[t].clone();
        for (l, b) in blocks.iter().enumerate() {
            e.gemv(-1.0, b, &state.states[t - l - 1], 1.0);
        }
        eps.set_column(c, &e);
    }
    eps
}

/// Update the innovation covariance given current states and kernels.
pub fn sample_innovation<R: Rng + ?Sized>(model: &FarModel, state: &mut ModelState, rng: &mut R) -> Result<()> {
    let eps = innovations(model, state);
    match &mut state.innovation {
        Innovation::Fdlm { cov, factors } => {
            let e = sample_factors(cov, &eps, rng);
            let prec = sample_ordered_precisions(&e, rng)?;
            cov.sigma2 = prec.map(|p| 1.0 / p);
            cov.sigma_eta2 = match model.config.nugget {
                NuggetMode::Sampled => 1.0 / sample_nugget(&eps, &cov.phi, &e, rng)?,
                NuggetMode::Fixed => FIXED_NUGGET,
            };
            sample_flcs(cov, &model.bphi, &e, &eps, rng)?;
            *factors = e;
        }
        Innovation::Matern { cov, upper } => {
            matern::sample_matern(cov, &model.points, *upper, &eps, rng)?;
        }
    }
    Ok(())
}

/// Gaussian log density of the innovations under the current covariance.
pub fn innovation_loglik(model: &FarModel, state: &ModelState) -> Result<f64> {
    let eps = innovations(model, state);
    let k = model.innovation_cov(state)?;
    let chol = cholesky_jitter(&k)?;
    let ld = crate::linalg::log_det_chol(&chol);
    let z = chol
        .l_dirty()
        .solve_lower_triangular(&eps)
        .ok_or_else(|| crate::Error::Numerical("triangular solve".into()))?;
    let n = eps.ncols() as f64;
    let m = eps.nrows() as f64;
    Ok(-0.5 * (n * ld + z.norm_squared() + n * m * (2.0 * std::f64::consts::PI).ln()))
}
