//! Starting values: spline-smoothed curves, conditional least-squares kernels
//! and an SVD factor model for the innovations.

use nalgebra::{DMatrix, DVector};

use super::{kernels, matern, FarModel, Innovation, KernelSetup, KernelStats, LagKernel, MaternCov, ModelKind, ModelState, NuggetMode};
use crate::error::{Error, Result};
use crate::fdlm::{select_n_factors, FdlmCovariance, FIXED_NUGGET, LAMBDA_FLOOR};
use crate::linalg::{cholesky_jitter, lstsq};
use crate::special::median;

const LOG10_LAMBDA_GRID: (f64, f64, usize) = (-8.0, 8.0, 65);

/// Cross products of a penalized least-squares problem.
#[derive(Debug, Clone)]
pub struct PenalizedLs {
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    n: usize,
}

#[derive(Debug, Clone)]
pub struct PenalizedFit {
    pub coef: DVector<f64>,
    pub df: f64,
    pub rss: f64,
}

impl PenalizedLs {
    pub fn new(x: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        Self {
            xtx: x.transpose() * x,
            xty: x.transpose() * y,
            yty: y.dot(y),
            n: y.len(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn fit(&self, pen: &DVector<f64>) -> Result<PenalizedFit> {
        let mut lhs = self.xtx.clone();
        for i in 0..pen.len() {
            lhs[(i, i)] += pen[i];
        }
        let chol = cholesky_jitter(&lhs)?;
        let coef = chol.solve(&self.xty);
        let df = chol.solve(&self.xtx).trace();
        let rss = (self.yty - 2.0 * coef.dot(&self.xty) + coef.dot(&(&self.xtx * &coef))).max(0.0);
        Ok(PenalizedFit { coef, df, rss })
    }

    /// Generalized cross-validation over a log grid of smoothing parameters.
    pub fn gcv<F: Fn(f64) -> DVector<f64>>(&self, pen: F) -> Result<(f64, PenalizedFit)> {
        let (lo, hi, k) = LOG10_LAMBDA_GRID;
        let mut best: Option<(f64, f64, PenalizedFit)> = None;
        for i in 0..k {
            let lam = 10f64.powf(lo + (hi - lo) * i as f64 / (k - 1) as f64);
            let f = self.fit(&pen(lam))?;
            let resid_df = self.n as f64 - f.df;
            if resid_df < 1e-6 {
                continue;
            }
            let score = self.n as f64 * f.rss / (resid_df * resid_df);
            if best.as_ref().is_none_or(|b| score < b.0) {
                best = Some((score, lam, f));
            }
        }
        match best {
            Some((_, lam, f)) => Ok((lam, f)),
            None => {
                let lam = 10f64.powf(hi);
                Ok((lam, self.fit(&pen(lam))?))
            }
        }
    }

    /// Smoothing parameter whose effective degrees of freedom equal `target`.
    pub fn match_df<F: Fn(f64) -> DVector<f64>>(&self, pen: F, target: f64) -> Result<(f64, PenalizedFit)> {
        let (mut lo, mut hi) = (-10.0f64, 12.0f64);
        let f_lo = self.fit(&pen(10f64.powf(lo)))?;
        if f_lo.df <= target {
            return Ok((10f64.powf(lo), f_lo));
        }
        let f_hi = self.fit(&pen(10f64.powf(hi)))?;
        if f_hi.df >= target {
            return Ok((10f64.powf(hi), f_hi));
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let f = self.fit(&pen(10f64.powf(mid)))?;
            if f.df > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let lam = 10f64.powf(0.5 * (lo + hi));
        Ok((lam, self.fit(&pen(lam))?))
    }
}

/// Smoothed starting curves.
#[derive(Debug, Clone)]
pub struct SmoothStart {
    pub theta_mu: DVector<f64>,
    pub lambda_mu: f64,
    /// Centered curves on the grid for the fitting times.
    pub states: Vec<DVector<f64>>,
    pub sigma_nu2: f64,
    /// Common degrees of freedom of the per-curve fits.
    pub df: f64,
}

/// Pooled mean by GCV, then per-curve fits of the centered data at the
/// median GCV degrees of freedom.
pub fn smooth_curves(model: &FarModel) -> Result<SmoothStart> {
    let b = &model.bphi;
    let jphi = b.ncols();
    let tp = &model.thin_plate;
    let pen = |lam: f64| tp.prior_precision(lam);
    let rows = |t: usize| DMatrix::from_fn(model.obs.index[t].len(), jphi, |r, c| b[(model.obs.index[t][r], c)]);

    let n_total: usize = (0..model.n_fit).map(|t| model.obs.index[t].len()).sum();
    let mut x_all = DMatrix::zeros(n_total, jphi);
    let mut y_all = DVector::zeros(n_total);
    let mut r = 0;
    for t in 0..model.n_fit {
        for (&i, &y) in model.obs.index[t].iter().zip(model.obs.values[t].iter()) {
            x_all.row_mut(r).copy_from(&b.row(i));
            y_all[r] = y;
            r += 1;
        }
    }
    let pooled = PenalizedLs::new(&x_all, &y_all);
    let (lambda_mu, mean_fit) = pooled.gcv(pen)?;
    let mean_grid = b * &mean_fit.coef;

    let problems: Vec<Option<PenalizedLs>> = (0..model.n_fit)
        .map(|t| {
            let idx = &model.obs.index[t];
            if idx.is_empty() {
                return None;
            }
            let y = DVector::from_iterator(
                idx.len(),
                idx.iter().zip(model.obs.values[t].iter()).map(|(&i, &v)| v - mean_grid[i]),
            );
            Some(PenalizedLs::new(&rows(t), &y))
        })
        .collect();
    let mut dfs = Vec::new();
    for p in problems.iter().flatten() {
        if p.n() > 2 {
            dfs.push(p.gcv(pen)?.1.df);
        }
    }
    let df = if dfs.is_empty() { 2.0 } else { median(&dfs) };

    let m = model.grid_len();
    let mut states = Vec::with_capacity(model.n_fit);
    let mut rss = 0.0;
    for p in &problems {
        match p {
            None => states.push(DVector::zeros(m)),
            Some(p) => {
                let (_, f) = p.match_df(pen, df)?;
                rss += f.rss;
                states.push(b * &f.coef);
            }
        }
    }
    let msy = y_all.norm_squared() / n_total.max(1) as f64;
    let sigma_nu2 = (rss / n_total.max(1) as f64).max(1e-8 * msy).max(1e-300);
    Ok(SmoothStart {
        theta_mu: mean_fit.coef,
        lambda_mu: lambda_mu.max(LAMBDA_FLOOR),
        states,
        sigma_nu2,
        df,
    })
}

/// Ridged least-squares kernels (identity innovation weight), mapped to the
/// `xi * theta_tilde` parametrization with `lambda_tilde = 1`.
///
/// The ridge multiplies the kernel penalty and is picked from a log grid by
/// one-step prediction error on the last fifth of the states.
pub fn init_kernels(setup: &KernelSetup, states: &[DVector<f64>], p_max: usize) -> Result<Vec<LagKernel>> {
    let m = setup.b.nrows();
    let d = setup.dim();
    let eye = DMatrix::identity(m, m);
    let template = |lt: f64| LagKernel {
        theta_tilde: DVector::zeros(d),
        xi: 1.0,
        lambda_tilde: lt,
        kappa: 1.0,
        included: true,
    };
    let solve = |stats: &KernelStats, ridge: f64| -> Result<DVector<f64>> {
        let (prec, lin) = kernels::theta_conditional(setup, stats, &vec![template(ridge); p_max]);
        Ok(cholesky_jitter(&prec)?.solve(&lin))
    };
    let stats = KernelStats::new(setup, states, p_max, &eye);
    let (data_prec, _) = kernels::theta_conditional(setup, &stats, &vec![template(0.0); p_max]);
    let pen_trace = setup.penalty(1.0).trace();
    let unit = if data_prec.trace() > 0.0 {
        data_prec.trace() / (p_max as f64 * pen_trace)
    } else {
        1.0
    };
    let tn = states.len();
    let split = p_max + (tn - p_max) * 4 / 5;
    let ridge = if tn - split >= 2 && split > 2 * p_max {
        let train = KernelStats::new(setup, &states[..split], p_max, &eye);
        let c: Vec<DVector<f64>> = states.iter().map(|x| &setup.bq * x).collect();
        let mut best = (f64::INFINITY, unit);
        for k in -6..=2 {
            let ridge = unit * 10f64.powi(k);
            let theta = solve(&train, ridge)?;
            let thetas: Vec<DMatrix<f64>> = (0..p_max)
                .map(|l| setup.tensor.theta_matrix(&theta.rows(l * d, d).into_owned()))
                .collect();
            let mut err = 0.0;
            for t in split..tn {
                let mut pred = DVector::zeros(setup.marginal_dim());
                for (l, th) in thetas.iter().enumerate() {
                    pred += th * &c[t - l - 1];
                }
                err += (&states[t] - &setup.b * pred).norm_squared();
            }
            if err < best.0 {
                best = (err, ridge);
            }
        }
        best.1
    } else {
        unit
    };
    let theta = solve(&stats, ridge)?;
    let omega = setup.penalty(1.0);
    Ok((0..p_max)
        .map(|l| {
            let th = theta.rows(l * d, d).into_owned();
            let q = th.dot(&(&omega * &th));
            let lambda = (d as f64 / q.max(1e-300)).clamp(LAMBDA_FLOOR, 1e12);
            let xi = lambda.powf(-0.5);
            LagKernel {
                theta_tilde: th / xi,
                xi,
                lambda_tilde: 1.0,
                kappa: 1.0,
                included: true,
            }
        })
        .collect())
}

/// Factor model from the leading singular vectors of the innovations.
pub fn init_fdlm(
    eps: &DMatrix<f64>,
    bphi: &DMatrix<f64>,
    n_factors: Option<usize>,
    nugget: NuggetMode,
) -> Result<(FdlmCovariance, DMatrix<f64>)> {
    let (m, tn) = eps.shape();
    let jphi = bphi.ncols();
    let cap = jphi.min(m).min(tn.max(1));
    let j = match n_factors {
        Some(j) => j,
        None => select_n_factors(eps)?,
    }
    .clamp(1, cap);
    let svd = eps.clone().svd(true, false);
    let u = svd.u.ok_or_else(|| Error::Numerical("svd".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].partial_cmp(&svd.singular_values[a]).unwrap());
    let lead = DMatrix::from_fn(m, j, |i, k| u[(i, order[k])]);
    let xi = lstsq(bphi, &lead)?;
    let mut cov = FdlmCovariance {
        phi: bphi * &xi,
        xi,
        sigma2: DVector::from_element(j, 1.0),
        sigma_eta2: 1.0,
        lambda_phi: DVector::from_element(j, 1.0),
    };
    cov.orthonormalize(bphi)?;
    let e = cov.phi.transpose() * eps;
    let var: Vec<f64> = (0..j).map(|k| e.row(k).norm_squared() / tn.max(1) as f64).collect();
    let mut perm: Vec<usize> = (0..j).collect();
    perm.sort_by(|&a, &b| var[b].partial_cmp(&var[a]).unwrap());
    let xi = DMatrix::from_fn(jphi, j, |r, c| cov.xi[(r, perm[c])]);
    let phi = DMatrix::from_fn(m, j, |r, c| cov.phi[(r, perm[c])]);
    let e = DMatrix::from_fn(j, tn, |r, c| e[(perm[r], c)]);
    let top = var[perm[0]].max(1e-300);
    let mut sigma2 = DVector::zeros(j);
    for k in 0..j {
        let v = var[perm[k]].max(1e-12 * top);
        sigma2[k] = if k == 0 { v } else { v.min(sigma2[k - 1] * (1.0 - 1e-6)) };
    }
    let resid = eps - &phi * &e;
    let per_cell = eps.norm_squared() / (m * tn.max(1)) as f64;
    let sigma_eta2 = match nugget {
        NuggetMode::Fixed => FIXED_NUGGET,
        NuggetMode::Sampled => (resid.norm_squared() / (m * tn.max(1)) as f64).max(1e-8 * per_cell).max(1e-300),
    };
    let lambda_phi = DVector::from_fn(j, |k, _| {
        let ss: f64 = xi.column(k).iter().skip(2).map(|v| v * v).sum();
        if jphi > 3 && ss > 0.0 {
            ((jphi as f64 - 3.0) / ss).clamp(LAMBDA_FLOOR, 1e8)
        } else {
            1.0
        }
    });
    let cov = FdlmCovariance {
        xi,
        phi,
        sigma2,
        sigma_eta2,
        lambda_phi,
    };
    cov.validate()?;
    Ok((cov, e))
}

pub fn initialize(model: &FarModel) -> Result<ModelState> {
    let cfg = &model.config;
    let smooth = smooth_curves(model)?;
    let lags = init_kernels(&model.kernel, &smooth.states, cfg.p_max)?;
    let mut state = ModelState {
        states: smooth.states,
        theta_mu: smooth.theta_mu,
        lambda_mu: smooth.lambda_mu,
        sigma_nu2: smooth.sigma_nu2,
        lags,
        innovation: Innovation::Matern {
            cov: MaternCov {
                sigma2: 1.0,
                nu: cfg.matern_nu,
                rho2: 1.0,
            },
            upper: 1.0,
        },
    };
    let eps = super::blocks::innovations(model, &state);
    state.innovation = match cfg.model {
        ModelKind::FdlmFar => {
            let (cov, factors) = init_fdlm(&eps, &model.bphi, cfg.n_factors, cfg.nugget)?;
            Innovation::Fdlm { cov, factors }
        }
        ModelKind::GpFar => {
            let upper = matern::range_upper_bound(&model.points, cfg.matern_nu)?;
            let s2 = (eps.norm_squared() / eps.len().max(1) as f64).max(1e-300);
            Innovation::Matern {
                cov: MaternCov {
                    sigma2: s2,
                    nu: cfg.matern_nu,
                    rho2: 0.5 * upper,
                },
                upper,
            }
        }
    };
    Ok(state)
}
