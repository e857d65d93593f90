//! FAR kernel surfaces: joint coefficient draw, Gelman scale and precision
//! auxiliaries, penalty mix, and lag inclusion states.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::slice::slice_sample;
use super::LagPrior;
use crate::basis::{BsplineBasis, TensorKernelBasis};
use crate::error::{Error, Result};
use crate::grid::EvaluationGrid;
use crate::linalg::{cholesky_jitter, log_det_chol, sample_from_precision, symmetrize};
use crate::special::sample_gamma;

/// Prior variance of the scale auxiliary `xi`.
pub const XI_PRIOR_VAR: f64 = 1e6;
/// Prior standard deviation of `log kappa`.
pub const LOG_KAPPA_SD: f64 = 2.0;
const KAPPA_SLICE_WIDTH: f64 = 1.2;

/// Basis, grid projections and penalties shared by all lags.
#[derive(Debug, Clone)]
pub struct KernelSetup {
    pub tensor: TensorKernelBasis,
    /// Marginal basis on the grid, `M x J`.
    pub b: DMatrix<f64>,
    /// `B' Q`, `J x M`.
    pub bq: DMatrix<f64>,
    pub omega2: DMatrix<f64>,
    pub omega0: DMatrix<f64>,
    gen_eig: Vec<f64>,
    logdet_omega0: f64,
}

impl KernelSetup {
    pub fn new(grid: &EvaluationGrid, n_interior: usize) -> Result<Self> {
        let pts = grid.points();
        let lo = pts[0].min(0.0);
        let hi = pts[pts.len() - 1].max(1.0);
        let marginal = BsplineBasis::uniform(n_interior, lo, hi)?;
        let b = marginal.eval(pts)?;
        let w = grid.weights();
        let bq = DMatrix::from_fn(b.ncols(), b.nrows(), |j, i| b[(i, j)] * w[i]);
        let tensor = TensorKernelBasis::new(marginal);
        let pens = tensor.penalties();
        // generalized eigenvalues of Omega_2 relative to Omega_0
        let chol0 = cholesky_jitter(&pens.omega0)?;
        let l = chol0.l();
        let linv_o2 = l
            .solve_lower_triangular(&pens.omega2)
            .ok_or_else(|| Error::Numerical("gram factor".into()))?;
        let mut sym = l
            .solve_lower_triangular(&linv_o2.transpose())
            .ok_or_else(|| Error::Numerical("gram factor".into()))?;
        symmetrize(&mut sym);
        let gen_eig = sym.symmetric_eigenvalues().iter().map(|d| d.max(0.0)).collect();
        Ok(Self {
            tensor,
            b,
            bq,
            omega2: pens.omega2,
            omega0: pens.omega0,
            gen_eig,
            logdet_omega0: log_det_chol(&chol0),
        })
    }

    pub fn marginal_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn dim(&self) -> usize {
        self.tensor.dim()
    }

    pub fn penalty(&self, kappa: f64) -> DMatrix<f64> {
        &self.omega2 + &self.omega0 * kappa
    }

    /// `log|Omega_2 + kappa Omega_0|`.
    pub fn penalty_logdet(&self, kappa: f64) -> f64 {
        self.logdet_omega0 + self.gen_eig.iter().map(|d| (d + kappa).ln()).sum::<f64>()
    }

    /// `B Theta B'` on the grid.
    pub fn psi(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        self.tensor.surface_with(theta, &self.b)
    }
}

/// One lag's kernel in the `theta = xi * theta_tilde` parametrization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagKernel {
    pub theta_tilde: DVector<f64>,
    pub xi: f64,
    pub lambda_tilde: f64,
    pub kappa: f64,
    pub included: bool,
}

impl LagKernel {
    pub fn theta(&self) -> DVector<f64> {
        &self.theta_tilde * self.xi
    }

    /// Implied smoothing precision `xi^{-2} lambda_tilde`.
    pub fn lambda(&self) -> f64 {
        self.lambda_tilde / (self.xi * self.xi)
    }

    pub fn s(&self) -> f64 {
        if self.included {
            1.0
        } else {
            0.0
        }
    }
}

/// Sufficient statistics of the states for the kernel likelihood.
///
/// Terms run over `t = p..T-1` (zero-based), so every lag exists in-sample.
#[derive(Debug, Clone)]
pub struct KernelStats {
    /// `cc[l][k] = sum_t c_{t-l} c_{t-k}'` with `c_t = B'Q mu_t` (lags zero-based).
    pub cc: Vec<Vec<DMatrix<f64>>>,
    /// `B' K^{-1} B`.
    pub h: DMatrix<f64>,
    /// `B' K^{-1} sum_t mu_t c_{t-l}'`.
    pub kd: Vec<DMatrix<f64>>,
    pub n_terms: usize,
}

impl KernelStats {
    pub fn new(setup: &KernelSetup, mu: &[DVector<f64>], p: usize, kinv: &DMatrix<f64>) -> Self {
        let j = setup.marginal_dim();
        let m = setup.b.nrows();
        let c: Vec<DVector<f64>> = mu.iter().map(|x| &setup.bq * x).collect();
        let tn = mu.len();
        let mut cc = vec![vec![DMatrix::zeros(j, j); p]; p];
        let mut d = vec![DMatrix::zeros(m, j); p];
        for t in p..tn {
            for l in 0..p {
                let cl = &c[t - l - 1];
                d[l].ger(1.0, &mu[t], cl, 1.0);
                for k in l..p {
                    cc[l][k].ger(1.0, cl, &c[t - k - 1], 1.0);
                }
            }
        }
        for l in 0..p {
            for k in 0..l {
                cc[l][k] = cc[k][l].transpose();
            }
        }
        let kb = kinv * &setup.b;
        let h = setup.b.transpose() * &kb;
        let kd = d.iter().map(|dl| kb.transpose() * dl).collect();
        Self {
            cc,
            h,
            kd,
            n_terms: tn.saturating_sub(p),
        }
    }

    pub fn lags(&self) -> usize {
        self.kd.len()
    }
}

/// Joint precision and linear term of all stacked `theta_tilde` blocks.
pub fn theta_conditional(setup: &KernelSetup, stats: &KernelStats, lags: &[LagKernel]) -> (DMatrix<f64>, DVector<f64>) {
    let p = lags.len();
    let d = setup.dim();
    let mut prec = DMatrix::zeros(p * d, p * d);
    let mut lin = DVector::zeros(p * d);
    for l in 0..p {
        let wl = lags[l].s() * lags[l].xi;
        for k in l..p {
            let wk = lags[k].s() * lags[k].xi;
            if wl * wk != 0.0 {
                let block = stats.cc[l][k].kronecker(&stats.h) * (wl * wk);
                prec.view_mut((l * d, k * d), (d, d)).copy_from(&block);
                if k != l {
                    prec.view_mut((k * d, l * d), (d, d)).copy_from(&block.transpose());
                }
            }
        }
        let pen = setup.penalty(lags[l].kappa) * lags[l].lambda_tilde;
        let mut diag = prec.view_mut((l * d, l * d), (d, d));
        diag += pen;
        if wl != 0.0 {
            let v = DVector::from_column_slice(stats.kd[l].as_slice()) * wl;
            lin.rows_mut(l * d, d).copy_from(&v);
        }
    }
    symmetrize(&mut prec);
    (prec, lin)
}

pub fn sample_theta_tilde<R: Rng + ?Sized>(
    setup: &KernelSetup,
    stats: &KernelStats,
    lags: &mut [LagKernel],
    rng: &mut R,
) -> Result<()> {
    let (prec, lin) = theta_conditional(setup, stats, lags);
    let (_, draw) = sample_from_precision(rng, &prec, &lin)?;
    let d = setup.dim();
    for (l, lag) in lags.iter_mut().enumerate() {
        lag.theta_tilde = draw.rows(l * d, d).into_owned();
    }
    Ok(())
}

fn mat(setup: &KernelSetup, theta: &DVector<f64>) -> DMatrix<f64> {
    setup.tensor.theta_matrix(theta)
}

fn trace_prod(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    // tr(a' b)
    a.dot(b)
}

/// Precision and linear term of the scalar `xi_l` given everything else.
pub fn xi_conditional(setup: &KernelSetup, stats: &KernelStats, lags: &[LagKernel], l: usize) -> (f64, f64) {
    let s = lags[l].s();
    let tt = mat(setup, &lags[l].theta_tilde);
    let htt = &stats.h * &tt;
    let prec = 1.0 / XI_PRIOR_VAR + s * trace_prod(&tt, &(&htt * &stats.cc[l][l])).max(0.0);
    if s == 0.0 {
        return (prec, 0.0);
    }
    let mut lin = trace_prod(&tt, &stats.kd[l]);
    for (k, other) in lags.iter().enumerate() {
        if k == l || !other.included {
            continue;
        }
        let tk = mat(setup, &other.theta_tilde);
        // tr(T_l' H T_k cc[k][l])
        lin -= other.xi * trace_prod(&tt, &(&stats.h * tk * &stats.cc[k][l]));
    }
    (prec, lin)
}

/// Update `xi`, `lambda_tilde` and (optionally) `kappa` for every lag in turn.
pub fn sample_scales<R: Rng + ?Sized>(
    setup: &KernelSetup,
    stats: &KernelStats,
    lags: &mut [LagKernel],
    sample_kappa: bool,
    rng: &mut R,
) -> Result<()> {
    let d = setup.dim() as f64;
    for l in 0..lags.len() {
        let (prec, lin) = xi_conditional(setup, stats, lags, l);
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        lags[l].xi = lin / prec + z / prec.sqrt();
        if sample_kappa {
            lags[l].kappa = draw_kappa(setup, &lags[l], rng);
        }
        let q = quad(&setup.penalty(lags[l].kappa), &lags[l].theta_tilde);
        lags[l].lambda_tilde = sample_gamma(rng, 0.5 + d / 2.0, 0.5 + q / 2.0)?;
    }
    Ok(())
}

fn quad(a: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(a * x))
}

/// Log full conditional of `z = log kappa`, up to a constant.
pub fn log_kappa_density(setup: &KernelSetup, lag: &LagKernel, z: f64) -> f64 {
    let kappa = z.exp();
    let q0 = quad(&setup.omega0, &lag.theta_tilde);
    0.5 * setup.penalty_logdet(kappa) - 0.5 * lag.lambda_tilde * kappa * q0
        - z * z / (2.0 * LOG_KAPPA_SD * LOG_KAPPA_SD)
}

fn draw_kappa<R: Rng + ?Sized>(setup: &KernelSetup, lag: &LagKernel, rng: &mut R) -> f64 {
    let z0 = lag.kappa.ln();
    let z = slice_sample(
        rng,
        z0,
        |z| log_kappa_density(setup, lag, z),
        KAPPA_SLICE_WIDTH,
        f64::NEG_INFINITY,
        f64::INFINITY,
    );
    z.exp()
}

/// Log likelihood ratio of including lag `l` (`s_l = 1` versus `0`) with all
/// other states and every kernel held fixed.
pub fn lag_log_likelihood_ratio(setup: &KernelSetup, stats: &KernelStats, lags: &[LagKernel], l: usize) -> f64 {
    let tl = mat(setup, &lags[l].theta());
    let htl = &stats.h * &tl;
    let mut out = trace_prod(&tl, &stats.kd[l]) - 0.5 * trace_prod(&tl, &(&htl * &stats.cc[l][l]));
    for (k, other) in lags.iter().enumerate() {
        if k == l || !other.included {
            continue;
        }
        let tk = mat(setup, &other.theta());
        out -= trace_prod(&tl, &(&stats.h * tk * &stats.cc[k][l]));
    }
    out
}

/// Markov-chain prior log odds of `s_l = 1` versus `0` given its neighbours.
pub fn lag_prior_log_odds(prior: &LagPrior, included: &[bool], l: usize) -> f64 {
    let ln = f64::ln;
    let mut out = if l == 0 {
        ln(prior.p1) - ln(1.0 - prior.p1)
    } else if included[l - 1] {
        ln(1.0 - prior.q10) - ln(prior.q10)
    } else {
        ln(prior.q01) - ln(1.0 - prior.q01)
    };
    if l + 1 < included.len() {
        out += if included[l + 1] {
            ln(1.0 - prior.q10) - ln(prior.q01)
        } else {
            ln(prior.q10) - ln(1.0 - prior.q01)
        };
    }
    out
}

/// Posterior log odds of inclusion for lag `l`.
pub fn lag_log_odds(setup: &KernelSetup, stats: &KernelStats, lags: &[LagKernel], prior: &LagPrior, l: usize) -> f64 {
    let inc: Vec<bool> = lags.iter().map(|x| x.included).collect();
    let prior_odds = lag_prior_log_odds(prior, &inc, l);
    if prior_odds.is_infinite() {
        return prior_odds;
    }
    lag_log_likelihood_ratio(setup, stats, lags, l) + prior_odds
}

/// Update the inclusion states in random order.
pub fn sample_lag_states<R: Rng + ?Sized>(
    setup: &KernelSetup,
    stats: &KernelStats,
    lags: &mut [LagKernel],
    prior: &LagPrior,
    rng: &mut R,
) {
    let mut order: Vec<usize> = (0..lags.len()).collect();
    order.shuffle(rng);
    for l in order {
        let odds = lag_log_odds(setup, stats, lags, prior, l);
        let u: f64 = rng.random();
        if odds.is_nan() {
            continue;
        }
        lags[l].included = odds > (1.0 / u - 1.0).ln();
    }
}

/// Largest included lag (0 when none).
pub fn effective_order(lags: &[LagKernel]) -> usize {
    lags.iter().rposition(|l| l.included).map_or(0, |i| i + 1)
}

/// Evolution blocks `s_l Psi_l Q` for lags up to the effective order.
pub fn evolution_blocks(setup: &KernelSetup, lags: &[LagKernel], weights: &[f64]) -> Vec<DMatrix<f64>> {
    let p = effective_order(lags);
    lags[..p]
        .iter()
        .map(|lag| {
            if lag.included {
                let mut psi = setup.psi(&lag.theta());
                for (j, w) in weights.iter().enumerate() {
                    psi.column_mut(j).scale_mut(*w);
                }
                psi
            } else {
                DMatrix::zeros(weights.len(), weights.len())
            }
        })
        .collect()
}
