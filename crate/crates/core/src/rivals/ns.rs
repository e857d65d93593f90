use argmin::core::{CostFunction, Executor, Gradient, State, TerminationReason, TerminationStatus};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::BFGS;
use finitediff::FiniteDiff;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{check_h, Fitted, Forecaster, Var1};
use crate::error::{Error, Result};
use crate::grid::ObservationSet;

/// Decay fixed by the two-step method (maturities in months).
pub const DL_LAMBDA: f64 = 0.0609;
const MIN_MATURITIES: usize = 4;
const MIN_TIMES: usize = 10;
const STATIONARY_RADIUS: f64 = 0.999;
const PENALTY: f64 = 1e10;

/// `(1 - e^{-x}) / x` with its limit 1 at 0.
fn slope_loading(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x / 2.0
    } else {
        -(-x).exp_m1() / x
    }
}

/// Level, slope and curvature loadings at maturities `taus`.
pub fn ns_loadings(taus: &[f64], lambda: f64) -> DMatrix<f64> {
    DMatrix::from_fn(taus.len(), 3, |i, j| {
        let x = taus[i] * lambda;
        match j {
            0 => 1.0,
            1 => slope_loading(x),
            _ => slope_loading(x) - (-x).exp(),
        }
    })
}

fn check_design(data: &ObservationSet, maturities: &[f64]) -> Result<()> {
    if maturities.len() != data.grid.len() {
        return Err(Error::Dimension(format!(
            "{} maturities for a grid of {}",
            maturities.len(),
            data.grid.len()
        )));
    }
    if maturities.len() < MIN_MATURITIES {
        return Err(Error::InsufficientData(format!("need {MIN_MATURITIES} maturities")));
    }
    if data.len() < MIN_TIMES {
        return Err(Error::InsufficientData(format!("need {MIN_TIMES} times")));
    }
    let f = ns_loadings(maturities, DL_LAMBDA);
    let sv = f.singular_values();
    if sv.min() < 1e-8 * sv.max() {
        return Err(Error::RankDeficient("Nelson-Siegel loadings are collinear".into()));
    }
    Ok(())
}

/// Cross-sectional least-squares factors per time; times with fewer than
/// three observed maturities repeat the previous factors.
pub fn ols_factors(data: &ObservationSet, maturities: &[f64], lambda: f64) -> Result<Vec<Vector3<f64>>> {
    let mut out: Vec<Vector3<f64>> = Vec::with_capacity(data.len());
    let mut pending = 0;
    for o in &data.times {
        let taus: Vec<f64> = o.incidence.index.iter().map(|&i| maturities[i]).collect();
        let beta = (taus.len() >= 3)
            .then(|| {
                let f = ns_loadings(&taus, lambda);
                (f.transpose() * &f)
                    .cholesky()
                    .map(|c| c.solve(&(f.transpose() * &o.values)))
            })
            .flatten();
        match (beta, out.last()) {
            (Some(b), _) => {
                let b = Vector3::new(b[0], b[1], b[2]);
                out.extend(std::iter::repeat_n(b, pending));
                pending = 0;
                out.push(b);
            }
            (None, Some(&prev)) => out.push(prev),
            (None, None) => pending += 1,
        }
    }
    if pending > 0 {
        return Err(Error::InsufficientData("no time with three maturities".into()));
    }
    Ok(out)
}

fn var_of(series: &[Vector3<f64>], diagonal: bool) -> Result<Var1> {
    let dv: Vec<DVector<f64>> = series.iter().map(|b| DVector::from_column_slice(b.as_slice())).collect();
    Var1::fit(&dv, true, diagonal)
}

fn to_m3(a: &DMatrix<f64>) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| a[(i, j)])
}

/// Two-step dynamic Nelson-Siegel: fixed decay, OLS factors, VAR(1) on factors.
#[derive(Debug, Clone)]
pub struct NelsonSiegelTwoStep {
    /// Maturity in months of each grid point.
    pub maturities: Vec<f64>,
    pub diagonal: bool,
}

impl NelsonSiegelTwoStep {
    pub fn new(maturities: Vec<f64>, diagonal: bool) -> Self {
        Self { maturities, diagonal }
    }
}

/// Factor dynamics `beta_t - mu = A (beta_{t-1} - mu) + eta_t` read through
/// Nelson-Siegel loadings.
pub struct NsFit {
    pub loadings: DMatrix<f64>,
    pub a: Matrix3<f64>,
    pub mu: Vector3<f64>,
    /// Factors at the last time (filtered for the state-space fit).
    pub last: Vector3<f64>,
    /// Centered-input filter for the state-space fit; OLS otherwise.
    filter: Option<NsParams>,
    maturities: Vec<f64>,
    lambda: f64,
    notes: Vec<String>,
}

impl NsFit {
    fn factors_ahead(&self, beta: Vector3<f64>, mu: Vector3<f64>, h: usize) -> Vector3<f64> {
        let mut d = beta - mu;
        for _ in 0..h {
            d = self.a * d;
        }
        mu + d
    }
}

impl Forecaster for NelsonSiegelTwoStep {
    fn id(&self) -> String {
        if self.diagonal { "dl-diagonal" } else { "dl" }.into()
    }

    fn fit(&self, history: &ObservationSet) -> Result<Box<dyn Fitted>> {
        check_design(history, &self.maturities)?;
        let betas = ols_factors(history, &self.maturities, DL_LAMBDA)?;
        let var = var_of(&betas, self.diagonal)?;
        let a = to_m3(&var.a);
        let c = Vector3::new(var.c[0], var.c[1], var.c[2]);
        let mu = (Matrix3::identity() - a)
            .try_inverse()
            .map(|m| m * c)
            .unwrap_or_else(|| betas.iter().sum::<Vector3<f64>>() / betas.len() as f64);
        let mut notes = Vec::new();
        if var.ridged {
            notes.push(format!("ridge fallback {}", super::VAR_RIDGE));
        }
        Ok(Box::new(NsFit {
            loadings: ns_loadings(&self.maturities, DL_LAMBDA),
            a,
            mu,
            last: betas[betas.len() - 1],
            filter: None,
            maturities: self.maturities.clone(),
            lambda: DL_LAMBDA,
            notes,
        }))
    }
}

impl Fitted for NsFit {
    fn predict(&self, h: usize) -> Result<DVector<f64>> {
        check_h(h)?;
        let b = self.factors_ahead(self.last, self.mu, h);
        Ok(&self.loadings * DVector::from_column_slice(b.as_slice()))
    }

    fn notes(&self) -> Vec<String> {
        self.notes.clone()
    }

    fn predict_centered(&self, recent: &[DVector<f64>], h: usize) -> Result<DVector<f64>> {
        check_h(h)?;
        let beta = match &self.filter {
            Some(p) => {
                let obs: Vec<(Vec<usize>, DVector<f64>)> =
                    recent.iter().map(|y| ((0..y.len()).collect(), y.clone())).collect();
                let mut centered = p.clone();
                centered.mu = Vector3::zeros();
                let run = kalman(&centered, &self.maturities, &obs, true)?;
                run.last
            }
            None => {
                let y = recent.last().ok_or_else(|| Error::InsufficientData("empty history".into()))?;
                let f = &self.loadings;
                let b = (f.transpose() * f)
                    .cholesky()
                    .ok_or_else(|| Error::RankDeficient("loadings".into()))?
                    .solve(&(f.transpose() * y));
                Vector3::new(b[0], b[1], b[2])
            }
        };
        let b = self.factors_ahead(beta, Vector3::zeros(), h);
        Ok(&self.loadings * DVector::from_column_slice(b.as_slice()))
    }

    fn input_dim(&self) -> usize {
        self.loadings.nrows()
    }

    fn forecast_from(&self, history: &ObservationSet, h: usize) -> Result<DVector<f64>> {
        check_h(h)?;
        let beta = match &self.filter {
            Some(p) => kalman(p, &self.maturities, &observations(history), false)?.last,
            None => *ols_factors(history, &self.maturities, self.lambda)?.last().expect("nonempty"),
        };
        let b = self.factors_ahead(beta, self.mu, h);
        Ok(&self.loadings * DVector::from_column_slice(b.as_slice()))
    }
}

/// Parameters of the Nelson-Siegel state-space model.
#[derive(Debug, Clone, PartialEq)]
pub struct NsParams {
    pub lambda: f64,
    pub a: Matrix3<f64>,
    pub mu: Vector3<f64>,
    /// Observation variances per maturity.
    pub h: DVector<f64>,
    /// Factor innovation variances.
    pub q: Vector3<f64>,
}

impl NsParams {
    /// `[log lambda, vec_row(A), mu, log h, log q]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.lambda.ln()];
        for i in 0..3 {
            for j in 0..3 {
                v.push(self.a[(i, j)]);
            }
        }
        v.extend(self.mu.iter());
        v.extend(self.h.iter().map(|x| x.ln()));
        v.extend(self.q.iter().map(|x| x.ln()));
        v
    }

    pub fn from_vec(v: &[f64], m: usize) -> Self {
        Self {
            lambda: v[0].exp(),
            a: Matrix3::from_fn(|i, j| v[1 + 3 * i + j]),
            mu: Vector3::new(v[10], v[11], v[12]),
            h: DVector::from_iterator(m, v[13..13 + m].iter().map(|x| x.exp())),
            q: Vector3::new(v[13 + m].exp(), v[14 + m].exp(), v[15 + m].exp()),
        }
    }

    fn spectral_radius(&self) -> f64 {
        self.a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Stationary factor covariance, by doubling on the Lyapunov series.
    fn stationary_cov(&self) -> Matrix3<f64> {
        let mut p = Matrix3::from_diagonal(&self.q);
        let mut a = self.a;
        for _ in 0..40 {
            let next = p + a * p * a.transpose();
            a *= a;
            if (next - p).amax() <= 1e-14 * next.amax() {
                return next;
            }
            p = next;
        }
        p
    }
}

pub struct KalmanRun {
    pub loglik: f64,
    /// Filtered factors at each time.
    pub filtered: Vec<Vector3<f64>>,
    pub last: Vector3<f64>,
}

/// Kalman filter with missing maturities; `obs` holds observed grid indices
/// and values per time. Starts from the stationary distribution.
pub fn kalman(
    params: &NsParams,
    maturities: &[f64],
    obs: &[(Vec<usize>, DVector<f64>)],
    keep: bool,
) -> Result<KalmanRun> {
    let f_all = ns_loadings(maturities, params.lambda);
    let qm = Matrix3::from_diagonal(&params.q);
    let mut a = params.mu;
    let mut p = params.stationary_cov();
    let mut loglik = 0.0;
    let mut filtered = Vec::with_capacity(if keep { obs.len() } else { 0 });
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    for (t, (idx, y)) in obs.iter().enumerate() {
        if t > 0 {
            a = params.mu + params.a * (a - params.mu);
            p = params.a * p * params.a.transpose() + qm;
        }
        if !idx.is_empty() {
            // information form: 3x3 solves and the Woodbury identity
            let p_chol = p
                .cholesky()
                .ok_or_else(|| Error::NotPositiveDefinite("predicted factor covariance".into()))?;
            let mut info = p_chol.inverse();
            let mut ftv = Vector3::zeros();
            let mut quad = 0.0;
            let mut log_h = 0.0;
            for (k, &g) in idx.iter().enumerate() {
                let row = Vector3::new(f_all[(g, 0)], f_all[(g, 1)], f_all[(g, 2)]);
                let hg = params.h[g];
                let v = y[k] - row.dot(&a);
                info += row * row.transpose() / hg;
                ftv += row * (v / hg);
                quad += v * v / hg;
                log_h += hg.ln();
            }
            let post = info
                .cholesky()
                .ok_or_else(|| Error::NotPositiveDefinite("posterior factor precision".into()))?;
            let da = post.solve(&ftv);
            let log_det = log_h + 2.0 * p_chol.l().diagonal().map(|d| d.ln()).sum()
                + 2.0 * post.l().diagonal().map(|d| d.ln()).sum();
            loglik -= 0.5 * (idx.len() as f64 * ln2pi + log_det + quad - ftv.dot(&da));
            a += da;
            p = post.inverse();
            p = (p + p.transpose()) * 0.5;
        }
        if keep {
            filtered.push(a);
        }
    }
    Ok(KalmanRun { loglik, filtered, last: a })
}

fn observations(data: &ObservationSet) -> Vec<(Vec<usize>, DVector<f64>)> {
    data.times.iter().map(|o| (o.incidence.index.clone(), o.values.clone())).collect()
}

struct NegLoglik<'a> {
    maturities: &'a [f64],
    obs: &'a [(Vec<usize>, DVector<f64>)],
}

impl NegLoglik<'_> {
    fn value(&self, v: &[f64]) -> f64 {
        if v.iter().any(|x| !x.is_finite()) || v.iter().skip(13).any(|x| x.abs() > 50.0) {
            return PENALTY;
        }
        let p = NsParams::from_vec(v, self.maturities.len());
        if p.spectral_radius() >= STATIONARY_RADIUS || !(1e-4..=10.0).contains(&p.lambda) {
            return PENALTY;
        }
        match kalman(&p, self.maturities, self.obs, false) {
            Ok(r) if r.loglik.is_finite() => -r.loglik / self.obs.len() as f64,
            _ => PENALTY,
        }
    }
}

impl CostFunction for NegLoglik<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.value(p))
    }
}

impl Gradient for NegLoglik<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, p: &Vec<f64>) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        Ok(p.central_diff(&|x| self.value(x)))
    }
}

/// Dynamic Nelson-Siegel fitted by maximum likelihood with quasi-Newton
/// restarts. Fits that fail to converge are reported as [`Error::Unstable`].
#[derive(Debug, Clone)]
pub struct DynamicNelsonSiegel {
    pub maturities: Vec<f64>,
    pub restarts: usize,
    pub max_iters: u64,
    pub seed: u64,
}

impl DynamicNelsonSiegel {
    pub fn new(maturities: Vec<f64>) -> Self {
        Self {
            maturities,
            restarts: 5,
            max_iters: 300,
            seed: 0,
        }
    }

    /// Two-step estimates used as the first optimizer start.
    pub fn two_step_params(&self, data: &ObservationSet) -> Result<NsParams> {
        let betas = ols_factors(data, &self.maturities, DL_LAMBDA)?;
        let var = var_of(&betas, false)?;
        let mut a = to_m3(&var.a);
        let radius = a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        if radius >= 0.99 {
            a *= 0.99 / radius;
        }
        let mean = betas.iter().sum::<Vector3<f64>>() / betas.len() as f64;
        let mut q = Vector3::zeros();
        for t in 1..betas.len() {
            let e = betas[t] - mean - a * (betas[t - 1] - mean);
            q += e.component_mul(&e);
        }
        q /= (betas.len() - 1) as f64;
        let m = self.maturities.len();
        let f = ns_loadings(&self.maturities, DL_LAMBDA);
        let mut ss = DVector::<f64>::zeros(m);
        let mut cnt = DVector::<f64>::zeros(m);
        for (o, b) in data.times.iter().zip(&betas) {
            let fit = &f * DVector::from_column_slice(b.as_slice());
            for (k, &i) in o.incidence.index.iter().enumerate() {
                ss[i] += (o.values[k] - fit[i]).powi(2);
                cnt[i] += 1.0;
            }
        }
        let total = ss.sum() / cnt.sum().max(1.0);
        let h = DVector::from_fn(m, |i, _| {
            let v = if cnt[i] > 0.0 { ss[i] / cnt[i] } else { total };
            v.max(1e-6 * total).max(1e-12)
        });
        Ok(NsParams {
            lambda: DL_LAMBDA,
            a,
            mu: mean,
            h,
            q: q.map(|x| x.max(1e-12)),
        })
    }

    /// Maximum-likelihood parameters and the attained log-likelihood.
    pub fn estimate(&self, data: &ObservationSet) -> Result<(NsParams, f64)> {
        check_design(data, &self.maturities)?;
        let m = self.maturities.len();
        let obs = observations(data);
        let start = self.two_step_params(data)?.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut starts = vec![start.clone()];
        for _ in 0..self.restarts {
            let mut s = start.clone();
            for (k, x) in s.iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += match k {
                    0 => 0.3 * z,
                    1..=9 => 0.05 * z,
                    10..=12 => 0.1 * z * x.abs().max(0.1),
                    _ => 0.5 * z,
                };
            }
            starts.push(s);
        }
        let n = start.len();
        let mut best: Option<(Vec<f64>, f64)> = None;
        let mut reasons = Vec::new();
        for s in starts {
            let problem = NegLoglik {
                maturities: &self.maturities,
                obs: &obs,
            };
            let solver = BFGS::new(MoreThuenteLineSearch::new())
                .with_tolerance_grad(1e-5)
                .and_then(|b| b.with_tolerance_cost(1e-12));
            let Ok(solver) = solver else { continue };
            let inv_h: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..n).map(|j| if i == j { 1e-2 } else { 0.0 }).collect())
                .collect();
            let run = Executor::new(problem, solver)
                .configure(|st| st.param(s).inv_hessian(inv_h).max_iters(self.max_iters))
                .run();
            let res = match run {
                Ok(r) => r,
                Err(e) => {
                    reasons.push(e.to_string());
                    continue;
                }
            };
            let st = res.state();
            let converged = matches!(
                st.get_termination_status(),
                TerminationStatus::Terminated(TerminationReason::SolverConverged)
            );
            let hess_ok = st
                .get_inv_hessian()
                .is_some_and(|h| h.iter().flatten().all(|x| x.is_finite()));
            let cost = st.get_best_cost();
            if !converged || !hess_ok || cost >= PENALTY {
                reasons.push(format!("{:?}", st.get_termination_status()));
                continue;
            }
            let p = st.get_best_param().cloned().unwrap_or_default();
            if best.as_ref().is_none_or(|(_, c)| cost < *c) {
                best = Some((p, cost));
            }
        }
        let (v, cost) = best.ok_or_else(|| Error::Unstable(format!("no start converged: {}", reasons.join("; "))))?;
        Ok((NsParams::from_vec(&v, m), -cost * obs.len() as f64))
    }
}

impl Forecaster for DynamicNelsonSiegel {
    fn id(&self) -> String {
        "dra".into()
    }

    fn fit(&self, history: &ObservationSet) -> Result<Box<dyn Fitted>> {
        let (params, _) = self.estimate(history)?;
        let run = kalman(&params, &self.maturities, &observations(history), false)?;
        if !run.last.iter().all(|x| x.is_finite()) {
            return Err(Error::Unstable("non-finite filtered factors".into()));
        }
        Ok(Box::new(NsFit {
            loadings: ns_loadings(&self.maturities, params.lambda),
            a: params.a,
            mu: params.mu,
            last: run.last,
            notes: vec![format!("lambda {:.5}", params.lambda)],
            lambda: params.lambda,
            filter: Some(params),
            maturities: self.maturities.clone(),
        }))
    }
}
