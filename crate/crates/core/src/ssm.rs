//! Kalman filtering, smoothing, simulation smoothing and forecasting for the
//! vectorized FAR(p) dynamic linear model
//!
//! ```text
//! y_t = Z_t (mu + x_t[0..M]) + nu_t,          nu_t ~ N(0, s2 I)
//! x_t = G x_{t-1} + (w_t, 0, ..., 0),         w_t  ~ N(0, W)
//! ```
//!
//! The state stacks `p` lags, `x_t = (mu_t, mu_{t-1}, ..., mu_{t-p+1})`, and `G`
//! is in companion form with first block row `(G_1, ..., G_p)`. Products with
//! `G` only touch the first block row, so covariance propagation costs
//! `O(p^2 M^3)` rather than `O(p^3 M^3)`.
//!
//! Covariances do not depend on the data, so the filter is split into a
//! covariance pass and a mean pass; the simulation smoother reuses one
//! covariance pass for the mean-correction construction.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::ObservationSet;
use crate::linalg::{cholesky_jitter, lower_mul, std_normal_vec, symmetrize};

#[derive(Debug, Clone)]
pub struct StateSpaceSpec {
    /// First block row of the companion evolution matrix; each block is `M x M`.
    pub blocks: Vec<DMatrix<f64>>,
    /// Evolution covariance `W` of the first block.
    pub state_cov: DMatrix<f64>,
    /// Measurement variance.
    pub obs_var: f64,
    /// Observation offset `mu` on the grid.
    pub offset: DVector<f64>,
    /// Covariance of the pre-sample state `x_0` (`pM x pM`); its mean is zero.
    pub init_cov: DMatrix<f64>,
}

impl StateSpaceSpec {
    /// Companion spec whose pre-sample lags are independent `N(0, W)` draws.
    pub fn far(blocks: Vec<DMatrix<f64>>, state_cov: DMatrix<f64>, obs_var: f64, offset: DVector<f64>) -> Result<Self> {
        let m = offset.len();
        let p = blocks.len().max(1);
        let mut init = DMatrix::zeros(p * m, p * m);
        if state_cov.shape() != (m, m) {
            return Err(Error::Dimension(format!("state_cov {:?}, grid {m}", state_cov.shape())));
        }
        for l in 0..p {
            init.view_mut((l * m, l * m), (m, m)).copy_from(&state_cov);
        }
        let spec = Self {
            blocks,
            state_cov,
            obs_var,
            offset,
            init_cov: init,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn grid_len(&self) -> usize {
        self.offset.len()
    }

    pub fn lags(&self) -> usize {
        self.blocks.len().max(1)
    }

    pub fn state_dim(&self) -> usize {
        self.lags() * self.grid_len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.grid_len();
        for (l, b) in self.blocks.iter().enumerate() {
            if b.shape() != (m, m) {
                return Err(Error::Dimension(format!("block {l} is {:?}, expected {m}x{m}", b.shape())));
            }
        }
        if self.state_cov.shape() != (m, m) {
            return Err(Error::Dimension("state covariance".into()));
        }
        let n = self.state_dim();
        if self.init_cov.shape() != (n, n) {
            return Err(Error::Dimension(format!("init_cov {:?}, state dim {n}", self.init_cov.shape())));
        }
        if !(self.obs_var >= 0.0) || !self.obs_var.is_finite() {
            return Err(Error::InvalidParameter(format!("obs_var {}", self.obs_var)));
        }
        Ok(())
    }

    /// `G x` for a state vector.
    pub fn apply_g_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = self.grid_len();
        let p = self.lags();
        let mut out = DVector::zeros(p * m);
        {
            let mut head = out.rows_mut(0, m);
            for (l, b) in self.blocks.iter().enumerate() {
                head.gemv(1.0, b, &x.rows(l * m, m), 1.0);
            }
        }
        if p > 1 {
            out.rows_mut(m, (p - 1) * m).copy_from(&x.rows(0, (p - 1) * m));
        }
        out
    }

    /// `G' r` for a state vector.
    pub fn apply_gt_vec(&self, r: &DVector<f64>) -> DVector<f64> {
        let m = self.grid_len();
        let p = self.lags();
        let mut out = DVector::zeros(p * m);
        let head = r.rows(0, m);
        for l in 0..p {
            let mut seg = out.rows_mut(l * m, m);
            if let Some(b) = self.blocks.get(l) {
                seg.gemv_tr(1.0, b, &head, 0.0);
            }
            if l + 1 < p {
                seg += r.rows((l + 1) * m, m);
            }
        }
        out
    }

    /// `G X` for an `n x k` matrix.
    pub fn apply_g(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let m = self.grid_len();
        let p = self.lags();
        let k = x.ncols();
        let mut out = DMatrix::zeros(p * m, k);
        {
            let mut head = out.rows_mut(0, m);
            for (l, b) in self.blocks.iter().enumerate() {
                head.gemm(1.0, b, &x.rows(l * m, m), 1.0);
            }
        }
        if p > 1 {
            out.rows_mut(m, (p - 1) * m).copy_from(&x.rows(0, (p - 1) * m));
        }
        out
    }

    /// `G' X` for an `n x k` matrix.
    pub fn apply_gt(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let m = self.grid_len();
        let p = self.lags();
        let k = x.ncols();
        let mut out = DMatrix::zeros(p * m, k);
        let head = x.rows(0, m);
        for l in 0..p {
            let mut seg = out.rows_mut(l * m, m);
            if let Some(b) = self.blocks.get(l) {
                seg.gemm_tr(1.0, b, &head, 0.0);
            }
            if l + 1 < p {
                seg += x.rows((l + 1) * m, m);
            }
        }
        out
    }

    /// `G C G' + W` for symmetric `C`.
    pub fn propagate_cov(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        let gc = self.apply_g(c);
        let mut r = self.apply_g(&gc.transpose());
        let m = self.grid_len();
        {
            let mut head = r.view_mut((0, 0), (m, m));
            head += &self.state_cov;
        }
        symmetrize(&mut r);
        r
    }
}

/// Observation index sets (rows of `Z_t` as grid indices) and values.
#[derive(Debug, Clone, Default)]
pub struct Observations {
    pub index: Vec<Vec<usize>>,
    pub values: Vec<DVector<f64>>,
}

impl Observations {
    pub fn from_set(set: &ObservationSet) -> Self {
        Self {
            index: set.times.iter().map(|o| o.incidence.index.clone()).collect(),
            values: set.times.iter().map(|o| o.values.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.index.len() != self.values.len() {
            return Err(Error::Dimension("index and value series differ in length".into()));
        }
        for (t, (i, v)) in self.index.iter().zip(&self.values).enumerate() {
            if i.len() != v.len() {
                return Err(Error::Dimension(format!("time {t}: {} indices, {} values", i.len(), v.len())));
            }
        }
        Ok(())
    }
}

/// Data-independent filter quantities.
#[derive(Debug, Clone)]
pub struct CovariancePass {
    pub index: Vec<Vec<usize>>,
    /// Prior covariances `R_t`.
    pub r: Vec<DMatrix<f64>>,
    /// Posterior covariances `C_t`.
    pub c: Vec<DMatrix<f64>>,
    /// Forecast covariances `Q_t` (of the observed components).
    pub q: Vec<DMatrix<f64>>,
    pub q_inv: Vec<DMatrix<f64>>,
    pub q_logdet: Vec<f64>,
    /// Gains `A_t = R_t Z_t' Q_t^{-1}`.
    pub gain: Vec<DMatrix<f64>>,
}

impl CovariancePass {
    pub fn new(spec: &StateSpaceSpec, index: &[Vec<usize>]) -> Result<Self> {
        spec.validate()?;
        let m = spec.grid_len();
        let tn = index.len();
        let mut out = Self {
            index: index.to_vec(),
            r: Vec::with_capacity(tn),
            c: Vec::with_capacity(tn),
            q: Vec::with_capacity(tn),
            q_inv: Vec::with_capacity(tn),
            q_logdet: Vec::with_capacity(tn),
            gain: Vec::with_capacity(tn),
        };
        let mut c_prev = spec.init_cov.clone();
        for idx in index {
            if idx.iter().any(|&i| i >= m) {
                return Err(Error::Dimension(format!("observation index beyond grid of {m}")));
            }
            let r = spec.propagate_cov(&c_prev);
            let k = idx.len();
            let (c, q, q_inv, logdet, gain);
            if k == 0 {
                c = r.clone();
                q = DMatrix::zeros(0, 0);
                q_inv = DMatrix::zeros(0, 0);
                logdet = 0.0;
                gain = DMatrix::zeros(r.nrows(), 0);
            } else {
                // R Z' (n x k) and Q = Z R Z' + s2 I
                let rz = DMatrix::from_fn(r.nrows(), k, |i, j| r[(i, idx[j])]);
                let mut qq = DMatrix::from_fn(k, k, |i, j| rz[(idx[i], j)]);
                for i in 0..k {
                    qq[(i, i)] += spec.obs_var;
                }
                symmetrize(&mut qq);
                let chol = cholesky_jitter(&qq)?;
                logdet = crate::linalg::log_det_chol(&chol);
                let qi = chol.inverse();
                let a = &rz * &qi;
                let mut cc = &r - &a * rz.transpose();
                symmetrize(&mut cc);
                c = cc;
                q = qq;
                q_inv = qi;
                gain = a;
            }
            out.r.push(r);
            c_prev = c.clone();
            out.c.push(c);
            out.q.push(q);
            out.q_inv.push(q_inv);
            out.q_logdet.push(logdet);
            out.gain.push(gain);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }
}

/// Data-dependent filter quantities for centered observations `y_t - Z_t mu`.
#[derive(Debug, Clone)]
pub struct MeanPass {
    pub a: Vec<DVector<f64>>,
    pub m: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
}

impl MeanPass {
    pub fn new(spec: &StateSpaceSpec, cov: &CovariancePass, centered: &[DVector<f64>]) -> Result<Self> {
        let tn = centered.len();
        if tn > cov.len() {
            return Err(Error::Dimension("more observation times than covariance pass".into()));
        }
        let n = spec.state_dim();
        let mut a_all = Vec::with_capacity(tn);
        let mut m_all = Vec::with_capacity(tn);
        let mut v_all = Vec::with_capacity(tn);
        let mut m_prev = DVector::zeros(n);
        for t in 0..tn {
            let a = spec.apply_g_vec(&m_prev);
            let idx = &cov.index[t];
            let y = &centered[t];
            if y.len() != idx.len() {
                return Err(Error::Dimension(format!("time {t}: {} values, {} indices", y.len(), idx.len())));
            }
            let v = DVector::from_iterator(idx.len(), idx.iter().zip(y.iter()).map(|(&i, &yy)| yy - a[i]));
            let m = if idx.is_empty() { a.clone() } else { &a + &cov.gain[t] * &v };
            m_prev = m.clone();
            a_all.push(a);
            m_all.push(m);
            v_all.push(v);
        }
        Ok(Self {
            a: a_all,
            m: m_all,
            v: v_all,
        })
    }
}

fn center(spec: &StateSpaceSpec, index: &[Vec<usize>], values: &[DVector<f64>]) -> Vec<DVector<f64>> {
    index
        .iter()
        .zip(values)
        .map(|(idx, y)| DVector::from_iterator(idx.len(), idx.iter().zip(y.iter()).map(|(&i, &v)| v - spec.offset[i])))
        .collect()
}

/// Full Kalman filter output.
#[derive(Debug, Clone)]
pub struct FilterResult {
    pub cov: CovariancePass,
    pub means: MeanPass,
    /// One-step forecast means `f_t = Z_t (mu + a_t)`.
    pub f: Vec<DVector<f64>>,
    /// Log-likelihood increments.
    pub loglik: Vec<f64>,
}

impl FilterResult {
    pub fn len(&self) -> usize {
        self.means.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.m.is_empty()
    }

    pub fn a(&self, t: usize) -> &DVector<f64> {
        &self.means.a[t]
    }

    pub fn m(&self, t: usize) -> &DVector<f64> {
        &self.means.m[t]
    }

    pub fn r(&self, t: usize) -> &DMatrix<f64> {
        &self.cov.r[t]
    }

    pub fn c(&self, t: usize) -> &DMatrix<f64> {
        &self.cov.c[t]
    }

    pub fn q(&self, t: usize) -> &DMatrix<f64> {
        &self.cov.q[t]
    }

    pub fn total_loglik(&self) -> f64 {
        self.loglik.iter().sum()
    }
}

pub fn kalman_filter(spec: &StateSpaceSpec, obs: &Observations) -> Result<FilterResult> {
    obs.validate()?;
    let cov = CovariancePass::new(spec, &obs.index)?;
    let centered = center(spec, &obs.index, &obs.values);
    let means = MeanPass::new(spec, &cov, &centered)?;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut f = Vec::with_capacity(obs.len());
    let mut ll = Vec::with_capacity(obs.len());
    for t in 0..obs.len() {
        let idx = &obs.index[t];
        f.push(DVector::from_iterator(
            idx.len(),
            idx.iter().map(|&i| spec.offset[i] + means.a[t][i]),
        ));
        let v = &means.v[t];
        let quad = if idx.is_empty() { 0.0 } else { (v.transpose() * &cov.q_inv[t] * v)[0] };
        ll.push(-0.5 * (idx.len() as f64 * ln2pi + cov.q_logdet[t] + quad));
    }
    Ok(FilterResult {
        cov,
        means,
        f,
        loglik: ll,
    })
}

/// Backward pass producing `(r_{t-1})_t` for smoothing means.
fn backward_r(spec: &StateSpaceSpec, cov: &CovariancePass, means: &MeanPass) -> Vec<DVector<f64>> {
    let tn = means.v.len();
    let n = spec.state_dim();
    let mut r = DVector::zeros(n);
    let mut out = vec![DVector::zeros(0); tn];
    for t in (0..tn).rev() {
        let gtr = spec.apply_gt_vec(&r);
        let idx = &cov.index[t];
        let mut prev = gtr.clone();
        if !idx.is_empty() {
            let u = &cov.q_inv[t] * &means.v[t] - cov.gain[t].transpose() * &gtr;
            for (j, &i) in idx.iter().enumerate() {
                prev[i] += u[j];
            }
        }
        r = prev;
        out[t] = r.clone();
    }
    out
}

/// Smoothed state means `E[x_t | y_{1:T}]` only.
pub fn smooth_means(spec: &StateSpaceSpec, cov: &CovariancePass, means: &MeanPass) -> Vec<DVector<f64>> {
    let rs = backward_r(spec, cov, means);
    (0..means.v.len())
        .map(|t| &means.a[t] + &cov.r[t] * &rs[t])
        .collect()
}

#[derive(Debug, Clone)]
pub struct SmootherResult {
    pub mean: Vec<DVector<f64>>,
    pub cov: Vec<DMatrix<f64>>,
}

pub fn kalman_smoother(filt: &FilterResult, spec: &StateSpaceSpec) -> Result<SmootherResult> {
    let cov = &filt.cov;
    let tn = filt.len();
    let n = spec.state_dim();
    let mean = smooth_means(spec, cov, &filt.means);
    let mut nmat = DMatrix::zeros(n, n);
    let mut covs = vec![DMatrix::zeros(0, 0); tn];
    for t in (0..tn).rev() {
        // G' N G
        let gtn = spec.apply_gt(&nmat);
        let mut m1 = spec.apply_gt(&gtn.transpose());
        let idx = &cov.index[t];
        if !idx.is_empty() {
            let a = &cov.gain[t];
            // X = M1 (I - A Z)
            let m1a = &m1 * a;
            for (j, &i) in idx.iter().enumerate() {
                let mut col = m1.column_mut(i);
                col -= m1a.column(j);
            }
            // (I - A Z)' X
            let atx = a.transpose() * &m1;
            for (j, &i) in idx.iter().enumerate() {
                let mut row = m1.row_mut(i);
                row -= atx.row(j);
            }
            let qi = &cov.q_inv[t];
            for (j1, &i1) in idx.iter().enumerate() {
                for (j2, &i2) in idx.iter().enumerate() {
                    m1[(i1, i2)] += qi[(j1, j2)];
                }
            }
        }
        symmetrize(&mut m1);
        nmat = m1;
        let r = &cov.r[t];
        let mut v = r - r * &nmat * r;
        symmetrize(&mut v);
        covs[t] = v;
    }
    Ok(SmootherResult { mean, cov: covs })
}

/// Reusable simulation-smoother engine: one covariance pass, many draws.
#[derive(Debug, Clone)]
pub struct SimulationSmoother<'a> {
    spec: &'a StateSpaceSpec,
    pub cov: CovariancePass,
    w_chol: DMatrix<f64>,
    init_chol: DMatrix<f64>,
}

impl<'a> SimulationSmoother<'a> {
    pub fn new(spec: &'a StateSpaceSpec, index: &[Vec<usize>]) -> Result<Self> {
        let cov = CovariancePass::new(spec, index)?;
        let w_chol = cholesky_jitter(&spec.state_cov)?.l();
        let init_chol = cholesky_jitter(&spec.init_cov)?.l();
        Ok(Self {
            spec,
            cov,
            w_chol,
            init_chol,
        })
    }

    pub fn spec(&self) -> &StateSpaceSpec {
        self.spec
    }

    /// Filter means for raw observations (offset removed internally).
    pub fn filter_means(&self, values: &[DVector<f64>]) -> Result<MeanPass> {
        let centered = center(self.spec, &self.cov.index[..values.len()], values);
        MeanPass::new(self.spec, &self.cov, &centered)
    }

    /// Joint draw of the first-block states `mu_1..mu_T` given `values` (T = `values.len()`).
    pub fn draw<R: Rng + ?Sized>(&self, values: &[DVector<f64>], rng: &mut R) -> Result<Vec<DVector<f64>>> {
        let spec = self.spec;
        let tn = values.len();
        let m = spec.grid_len();
        let sd = spec.obs_var.sqrt();
        // unconditional draw x+, y+
        let mut x = lower_mul(&self.init_chol, &std_normal_vec(rng, spec.state_dim()));
        let mut xs = Vec::with_capacity(tn);
        let mut ystar = Vec::with_capacity(tn);
        for t in 0..tn {
            let mut nx = spec.apply_g_vec(&x);
            let w = lower_mul(&self.w_chol, &std_normal_vec(rng, m));
            {
                let mut head = nx.rows_mut(0, m);
                head += w;
            }
            x = nx;
            let idx = &self.cov.index[t];
            let y = &values[t];
            // y* = (y - Z mu) - (Z x+ + noise)
            let ys = DVector::from_iterator(
                idx.len(),
                idx.iter().zip(y.iter()).map(|(&i, &v)| {
                    let noise: f64 = rng.sample(rand_distr::StandardNormal);
                    v - spec.offset[i] - x[i] - sd * noise
                }),
            );
            ystar.push(ys);
            xs.push(x.rows(0, m).into_owned());
        }
        let means = MeanPass::new(spec, &self.cov, &ystar)?;
        let rs = backward_r(spec, &self.cov, &means);
        Ok((0..tn)
            .map(|t| {
                let hat = means.a[t].rows(0, m) + self.cov.r[t].rows(0, m) * &rs[t];
                &xs[t] + hat
            })
            .collect())
    }
}

/// One joint draw of `mu_1..mu_T` from the smoothing distribution.
pub fn simulation_smoother<R: Rng + ?Sized>(
    spec: &StateSpaceSpec,
    obs: &Observations,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    obs.validate()?;
    SimulationSmoother::new(spec, &obs.index)?.draw(&obs.values, rng)
}

#[derive(Debug, Clone)]
pub struct Forecast {
    /// Mean and covariance of the first state block `mu_{T+h}`.
    pub state_mean: DVector<f64>,
    pub state_cov: DMatrix<f64>,
    /// Mean and covariance of `y_{T+h}` on the full grid.
    pub obs_mean: DVector<f64>,
    pub obs_cov: DMatrix<f64>,
}

/// `h`-step forecast from the last filtered state.
pub fn forecast(spec: &StateSpaceSpec, filt: &FilterResult, h: usize) -> Result<Forecast> {
    if h == 0 {
        return Err(Error::InvalidParameter("forecast horizon must be >= 1".into()));
    }
    let (mut a, mut r) = match filt.len() {
        0 => (DVector::zeros(spec.state_dim()), spec.init_cov.clone()),
        t => (filt.m(t - 1).clone(), filt.c(t - 1).clone()),
    };
    for _ in 0..h {
        a = spec.apply_g_vec(&a);
        r = spec.propagate_cov(&r);
    }
    let m = spec.grid_len();
    let state_mean = a.rows(0, m).into_owned();
    let state_cov = r.view((0, 0), (m, m)).into_owned();
    let obs_mean = &spec.offset + &state_mean;
    let obs_cov = &state_cov + DMatrix::identity(m, m) * spec.obs_var;
    Ok(Forecast {
        state_mean,
        state_cov,
        obs_mean,
        obs_cov,
    })
}

/// `E[x_{t+h} | y_{1:t}] = G^h m_t` for a state mean.
pub fn propagate_mean(spec: &StateSpaceSpec, m: &DVector<f64>, h: usize) -> DVector<f64> {
    let mut a = m.clone();
    for _ in 0..h {
        a = spec.apply_g_vec(&a);
    }
    a
}
