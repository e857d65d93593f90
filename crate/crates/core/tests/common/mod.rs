//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use gpfar::far::kernels::evolution_blocks;
use gpfar::far::{KernelSetup, LagKernel};
use gpfar::fdlm::FdlmCovariance;
use gpfar::grid::{EvaluationGrid, ObservationSet};
use gpfar::ssm::{Observations, StateSpaceSpec};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn randn<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_spd<R: Rng>(rng: &mut R, n: usize, ridge: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| randn(rng));
    &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * ridge
}

/// Dense companion matrix built from the spec's blocks.
pub fn dense_g(spec: &StateSpaceSpec) -> DMatrix<f64> {
    let m = spec.grid_len();
    let p = spec.lags();
    let mut g = DMatrix::zeros(p * m, p * m);
    for (l, b) in spec.blocks.iter().enumerate() {
        g.view_mut((0, l * m), (m, m)).copy_from(b);
    }
    for l in 1..p {
        g.view_mut((l * m, (l - 1) * m), (m, m)).copy_from(&DMatrix::identity(m, m));
    }
    g
}

/// Joint Gaussian of all states and all observations, conditioned directly.
pub struct JointOracle {
    pub mean: Vec<DVector<f64>>,
    pub cov: Vec<DMatrix<f64>>,
    pub loglik: f64,
}

pub fn joint_oracle(spec: &StateSpaceSpec, obs: &Observations) -> JointOracle {
    let m = spec.grid_len();
    let n = spec.state_dim();
    let tn = obs.index.len();
    let g = dense_g(spec);
    let mut w = DMatrix::zeros(n, n);
    w.view_mut((0, 0), (m, m)).copy_from(&spec.state_cov);
    // marginal covariances P_t and cross covariances Cov(x_s, x_t) = G^{s-t} P_t for s >= t
    let mut p = Vec::with_capacity(tn);
    let mut prev = spec.init_cov.clone();
    for _ in 0..tn {
        let cur = &g * &prev * g.transpose() + &w;
        p.push(cur.clone());
        prev = cur;
    }
    let mut gpow = vec![DMatrix::identity(n, n)];
    for k in 1..tn {
        let nx = &g * &gpow[k - 1];
        gpow.push(nx);
    }
    let big = n * tn;
    let mut sxx = DMatrix::zeros(big, big);
    for s in 0..tn {
        for t in 0..=s {
            let c = &gpow[s - t] * &p[t];
            sxx.view_mut((s * n, t * n), (n, n)).copy_from(&c);
            sxx.view_mut((t * n, s * n), (n, n)).copy_from(&c.transpose());
        }
    }
    // Z selects grid indices of the first block at each time
    let rows: Vec<(usize, usize)> = obs
        .index
        .iter()
        .enumerate()
        .flat_map(|(t, idx)| idx.iter().map(move |&i| (t, i)))
        .collect();
    let ny = rows.len();
    let mut z = DMatrix::zeros(ny, big);
    let mut y = DVector::zeros(ny);
    let mut k = 0;
    for (t, idx) in obs.index.iter().enumerate() {
        for (j, &i) in idx.iter().enumerate() {
            z[(k, t * n + i)] = 1.0;
            y[k] = obs.values[t][j] - spec.offset[i];
            k += 1;
        }
    }
    let syy = &z * &sxx * z.transpose() + DMatrix::identity(ny, ny) * spec.obs_var;
    let sxy = &sxx * z.transpose();
    let syy_inv = syy.clone().try_inverse().unwrap();
    let mx = &sxy * &syy_inv * &y;
    let cx = &sxx - &sxy * &syy_inv * sxy.transpose();
    let det = syy.clone().cholesky().map(|c| 2.0 * c.l().diagonal().map(|v| v.ln()).sum()).unwrap_or(0.0);
    let loglik = -0.5 * (ny as f64 * (2.0 * std::f64::consts::PI).ln() + det + (y.transpose() * &syy_inv * &y)[0]);
    JointOracle {
        mean: (0..tn).map(|t| mx.rows(t * n, n).into_owned()).collect(),
        cov: (0..tn).map(|t| cx.view((t * n, t * n), (n, n)).into_owned()).collect(),
        loglik,
    }
}

/// Random small FAR(p) state-space instance with random missingness.
pub fn random_instance<R: Rng>(rng: &mut R, m: usize, p: usize, tn: usize) -> (StateSpaceSpec, Observations) {
    let blocks: Vec<DMatrix<f64>> = (0..p)
        .map(|_| DMatrix::from_fn(m, m, |_, _| randn(rng) * 0.4 / (m as f64 * p as f64).sqrt()))
        .collect();
    let w = random_spd(rng, m, 0.2);
    let offset = DVector::from_fn(m, |_, _| randn(rng) * 0.3);
    let obs_var = 0.05 + rng.random::<f64>() * 0.5;
    let spec = StateSpaceSpec::far(blocks, w, obs_var, offset).unwrap();
    let mut index = Vec::new();
    let mut values = Vec::new();
    for _ in 0..tn {
        let idx: Vec<usize> = (0..m).filter(|_| rng.random::<f64>() < 0.6).collect();
        values.push(DVector::from_fn(idx.len(), |_, _| randn(rng)));
        index.push(idx);
    }
    (spec, Observations { index, values })
}

pub fn random_lag<R: Rng>(rng: &mut R, d: usize, scale: f64, included: bool) -> LagKernel {
    LagKernel {
        theta_tilde: DVector::from_fn(d, |_, _| randn(rng) * scale),
        xi: 0.5 + rng.random::<f64>(),
        lambda_tilde: 0.5 + rng.random::<f64>(),
        kappa: 0.3 + rng.random::<f64>(),
        included,
    }
}

pub fn random_states<R: Rng>(rng: &mut R, m: usize, tn: usize) -> Vec<DVector<f64>> {
    (0..tn).map(|_| DVector::from_fn(m, |_, _| randn(rng))).collect()
}

/// Complete-data log likelihood of the states given kernels, dropped constants.
pub fn brute_loglik(setup: &KernelSetup, grid: &EvaluationGrid, lags: &[LagKernel], mu: &[DVector<f64>], kinv: &DMatrix<f64>) -> f64 {
    let p = lags.len();
    let blocks = evolution_blocks(setup, lags, grid.weights());
    let mut out = 0.0;
    for t in p..mu.len() {
        let mut e = mu[t].clone();
        for (l, b) in blocks.iter().enumerate() {
            e -= b * &mu[t - l - 1];
        }
        out -= 0.5 * e.dot(&(kinv * &e));
    }
    out
}

pub fn dense_dataset<R: Rng>(rng: &mut R, m: usize, tn: usize, missing: f64) -> ObservationSet {
    let grid = EvaluationGrid::uniform(m).unwrap();
    let pts = grid.points().to_vec();
    let mut prev = DVector::<f64>::zeros(m);
    let data = (0..tn)
        .map(|_| {
            let cur = DVector::from_fn(m, |i, _| 0.5 * prev[i] + 0.1 * randn(rng));
            prev = cur.clone();
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for i in 0..m {
                if rng.random::<f64>() >= missing {
                    xs.push(pts[i]);
                    ys.push(0.2 * pts[i] + cur[i] + 0.01 * randn(rng));
                }
            }
            (xs, ys)
        })
        .collect();
    ObservationSet::new(grid, data).unwrap()
}

pub fn random_fdlm<R: Rng>(rng: &mut R, m: usize, j: usize) -> FdlmCovariance {
    let a = DMatrix::from_fn(m, j, |_, _| randn(rng));
    let q = a.qr().q().columns(0, j).into_owned();
    let mut s: Vec<f64> = (0..j).map(|_| 0.05 + 3.0 * rand::Rng::random::<f64>(rng)).collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s.dedup();
    let j = s.len();
    let q = q.columns(0, j).into_owned();
    FdlmCovariance::from_loadings(q, DVector::from_vec(s), 0.02 + rand::Rng::random::<f64>(rng)).unwrap()
}
