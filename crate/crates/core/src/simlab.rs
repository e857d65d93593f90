//! Simulation designs: FAR kernels, observation designs, scenario generation
//! with oracle forecasts, and the quadrature-approximation error study.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{linspace, EvaluationGrid, ObservationSet};
use crate::linalg::{lower_mul, std_normal_vec};
use crate::special::{matern_corr, median};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    BimodalGaussian,
    LinearTau,
    LinearU,
    Zero,
}

/// One term `c f(tau) g(u)` of a separable kernel expansion.
struct Term {
    coef: f64,
    f: fn(f64) -> f64,
    g: fn(f64) -> f64,
}

fn bump_tau_a(x: f64) -> f64 {
    (-((x - 0.2) / 0.3).powi(2)).exp()
}
fn bump_u_a(x: f64) -> f64 {
    (-((x - 0.3) / 0.4).powi(2)).exp()
}
fn bump_tau_b(x: f64) -> f64 {
    (-((x - 0.7) / 0.3).powi(2)).exp()
}
fn bump_u_b(x: f64) -> f64 {
    (-((x - 0.8) / 0.4).powi(2)).exp()
}
fn one(_: f64) -> f64 {
    1.0
}
fn ident(x: f64) -> f64 {
    x
}

impl KernelFamily {
    fn terms(self) -> Vec<Term> {
        let norm = std::f64::consts::PI * 0.3 * 0.4;
        match self {
            Self::BimodalGaussian => vec![
                Term {
                    coef: 0.75 / norm,
                    f: bump_tau_a,
                    g: bump_u_a,
                },
                Term {
                    coef: 0.45 / norm,
                    f: bump_tau_b,
                    g: bump_u_b,
                },
            ],
            Self::LinearTau => vec![Term {
                coef: 1.0,
                f: ident,
                g: one,
            }],
            Self::LinearU => vec![Term {
                coef: 1.0,
                f: one,
                g: ident,
            }],
            Self::Zero => Vec::new(),
        }
    }

    /// Kernel before normalization.
    pub fn raw(self, tau: f64, u: f64) -> f64 {
        self.terms().iter().map(|t| t.coef * (t.f)(tau) * (t.g)(u)).sum()
    }

    /// `int int raw^2` over the unit square, from the separable expansion.
    pub fn raw_sq_norm(self) -> f64 {
        let terms = self.terms();
        let mut out = 0.0;
        for a in &terms {
            for b in &terms {
                let ft = simpson01(|x| (a.f)(x) * (b.f)(x));
                let gu = simpson01(|x| (a.g)(x) * (b.g)(x));
                out += a.coef * b.coef * ft * gu;
            }
        }
        out
    }
}

fn simpson01<F: Fn(f64) -> f64>(f: F) -> f64 {
    let n = 4000;
    let h = 1.0 / n as f64;
    let mut s = f(0.0) + f(1.0);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(i as f64 * h);
    }
    s * h / 3.0
}

/// A kernel family rescaled to squared L2 norm `norm`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub norm: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, norm: f64) -> Self {
        Self { family, norm }
    }

    pub fn scale(&self) -> f64 {
        let raw = self.family.raw_sq_norm();
        if raw == 0.0 || self.norm == 0.0 {
            0.0
        } else {
            (self.norm / raw).sqrt()
        }
    }

    pub fn eval(&self, tau: f64, u: f64) -> f64 {
        self.scale() * self.family.raw(tau, u)
    }

    /// `psi(tau_i, u_k)` for all pairs.
    pub fn matrix(&self, taus: &[f64], us: &[f64]) -> DMatrix<f64> {
        let s = self.scale();
        DMatrix::from_fn(taus.len(), us.len(), |i, k| s * self.family.raw(taus[i], us[k]))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.norm >= 0.0 && self.norm.is_finite()) {
            return Err(Error::InvalidParameter(format!("kernel norm {}", self.norm)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignKind {
    /// 25 equally spaced points every time.
    Dense,
    /// Zero-truncated Poisson(5) count, points drawn without replacement.
    SparseRandom,
    /// 8 equally spaced points every time.
    SparseFixed,
}

impl DesignKind {
    /// Grid indices observed at one time.
    pub fn draw_indices<R: Rng + ?Sized>(self, m: usize, rng: &mut R) -> Vec<usize> {
        match self {
            Self::Dense => spread_indices(m, 25),
            Self::SparseFixed => spread_indices(m, 8),
            Self::SparseRandom => {
                let k = zero_truncated_poisson(rng, 5.0).min(m);
                let mut idx = sample(rng, m, k).into_vec();
                idx.sort_unstable();
                idx
            }
        }
    }
}

/// `k` roughly equally spaced indices of an `m`-point grid, endpoints included.
pub fn spread_indices(m: usize, k: usize) -> Vec<usize> {
    if k >= m {
        return (0..m).collect();
    }
    if k == 1 {
        return vec![0];
    }
    let mut out: Vec<usize> = (0..k)
        .map(|i| ((i as f64) * (m - 1) as f64 / (k - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

pub fn zero_truncated_poisson<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> usize {
    let pois = Poisson::new(rate).expect("positive rate");
    loop {
        let k = pois.sample(rng) as usize;
        if k > 0 {
            return k;
        }
    }
}

pub fn mean_function(tau: f64) -> f64 {
    tau.powi(3) * (2.0 * std::f64::consts::PI * tau).sin() / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    /// Length of the fitting period.
    pub t_fit: usize,
    /// One-step forecast evaluations after the fitting period.
    pub n_forecast: usize,
    /// Kernels by lag.
    pub kernels: Vec<KernelSpec>,
    pub matern_nu: f64,
    pub sigma: f64,
    pub rho2: f64,
    pub sigma_nu: f64,
    pub design: DesignKind,
    pub eval_size: usize,
    pub fine_size: usize,
    pub burn_in: usize,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            t_fit: 350,
            n_forecast: 25,
            kernels: vec![KernelSpec::new(KernelFamily::BimodalGaussian, 0.8)],
            matern_nu: 2.5,
            sigma: 0.01,
            rho2: 0.1,
            sigma_nu: 0.002,
            design: DesignKind::SparseRandom,
            eval_size: 30,
            fine_size: 200,
            burn_in: 100,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.t_fit < 2 || self.eval_size < 2 || self.fine_size < 2 {
            return Err(Error::InvalidParameter("scenario sizes too small".into()));
        }
        if !(self.sigma > 0.0 && self.rho2 > 0.0 && self.matern_nu > 0.0 && self.sigma_nu >= 0.0) {
            return Err(Error::InvalidParameter("scenario scales must be positive".into()));
        }
        for k in &self.kernels {
            k.validate()?;
        }
        Ok(())
    }

    pub fn total_times(&self) -> usize {
        self.t_fit + self.n_forecast
    }

    pub fn order(&self) -> usize {
        self.kernels.len()
    }
}

/// One simulated dataset with everything needed to score forecasts.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub fine: EvaluationGrid,
    pub data: ObservationSet,
    /// Latent `Y_t = mu + mu_t` on the evaluation grid.
    pub truth: Vec<DVector<f64>>,
    /// Latent centered curves on the fine grid.
    pub latent_fine: Vec<DVector<f64>>,
    /// `mu + sum_l int psi_l mu_{t-l}` on the evaluation grid (fine-grid quadrature).
    pub oracle: Vec<DVector<f64>>,
    /// True kernels on the evaluation grid, by lag.
    pub psi: Vec<DMatrix<f64>>,
}

impl Scenario {
    /// Times whose one-step forecasts are scored (zero-based).
    pub fn forecast_times(&self) -> std::ops::Range<usize> {
        self.spec.t_fit..self.spec.total_times()
    }

    /// Average squared error of the oracle one-step forecasts over the
    /// forecast times, per grid point.
    pub fn oracle_msfe(&self) -> f64 {
        let mut total = 0.0;
        let mut cells = 0;
        for t in self.forecast_times() {
            for (a, b) in self.truth[t].iter().zip(self.oracle[t].iter()) {
                total += (a - b) * (a - b);
                cells += 1;
            }
        }
        total / cells as f64
    }
}

/// Lower Cholesky factor of `sigma^2 R` on `points`, with 1e-10 jitter on `R`.
pub fn matern_factor(points: &[f64], nu: f64, rho2: f64, sigma: f64) -> Result<DMatrix<f64>> {
    let n = points.len();
    let mut jitter = 1e-10;
    loop {
        let r = DMatrix::from_fn(n, n, |i, j| {
            matern_corr(nu, (points[i] - points[j]).abs() / rho2) + if i == j { jitter } else { 0.0 }
        });
        if let Some(c) = r.cholesky() {
            return Ok(c.l() * sigma);
        }
        jitter *= 10.0;
        if jitter > 1e-4 {
            return Err(Error::Numerical("Matérn correlation not positive definite".into()));
        }
    }
}

pub fn simulate_scenario<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> Result<Scenario> {
    spec.validate()?;
    let eval = EvaluationGrid::uniform(spec.eval_size)?;
    let fine_pts = linspace(0.0, 1.0, spec.fine_size);
    let fine = EvaluationGrid::union(&[&fine_pts, eval.points()])?;
    let fp = fine.points();
    let eval_idx: Vec<usize> = eval.points().iter().map(|&x| fine.index_of(x)).collect::<Result<_>>()?;
    let w = fine.weights();
    let p = spec.order();
    // kernel matrices with the quadrature weights folded into the columns
    let evol: Vec<DMatrix<f64>> = spec
        .kernels
        .iter()
        .map(|k| {
            let mut m = k.matrix(fp, fp);
            for (j, wj) in w.iter().enumerate() {
                m.column_mut(j).scale_mut(*wj);
            }
            m
        })
        .collect();
    let chol = matern_factor(fp, spec.matern_nu, spec.rho2, spec.sigma)?;
    let nf = fp.len();
    let total = spec.burn_in + spec.total_times();
    let mut path: Vec<DVector<f64>> = Vec::with_capacity(total + p);
    for _ in 0..p {
        path.push(lower_mul(&chol, &std_normal_vec(rng, nf)));
    }
    let mut cond_mean: Vec<DVector<f64>> = Vec::with_capacity(total);
    for _ in 0..total {
        let n = path.len();
        let mut mean = DVector::zeros(nf);
        for (l, g) in evol.iter().enumerate() {
            mean.gemv(1.0, g, &path[n - 1 - l], 1.0);
        }
        let eps = lower_mul(&chol, &std_normal_vec(rng, nf));
        path.push(&mean + eps);
        cond_mean.push(mean);
    }
    let keep = p + spec.burn_in;
    let latent_fine: Vec<DVector<f64>> = path[keep..].to_vec();
    let cond_mean = &cond_mean[spec.burn_in..];
    let mean_eval = DVector::from_iterator(eval.len(), eval.points().iter().map(|&x| mean_function(x)));
    let at_eval = |v: &DVector<f64>| DVector::from_iterator(eval_idx.len(), eval_idx.iter().map(|&i| v[i]));
    let truth: Vec<DVector<f64>> = latent_fine.iter().map(|v| at_eval(v) + &mean_eval).collect();
    let oracle: Vec<DVector<f64>> = cond_mean.iter().map(|v| at_eval(v) + &mean_eval).collect();

    let ep = eval.points();
    let mut obs = Vec::with_capacity(truth.len());
    for y in &truth {
        let idx = spec.design.draw_indices(eval.len(), rng);
        let xs: Vec<f64> = idx.iter().map(|&i| ep[i]).collect();
        let ys: Vec<f64> = idx
            .iter()
            .map(|&i| y[i] + spec.sigma_nu * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        obs.push((xs, ys));
    }
    let data = ObservationSet::new(eval.clone(), obs)?;
    let psi = spec.kernels.iter().map(|k| k.matrix(ep, ep)).collect();
    Ok(Scenario {
        spec: spec.clone(),
        fine,
        data,
        truth,
        latent_fine,
        oracle,
        psi,
    })
}

/// Pointwise medians of the quadrature error functionals for one `M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadErrorRow {
    pub m: usize,
    /// Relative absolute error.
    pub r: f64,
    /// Standardized squared error.
    pub s: f64,
}

/// Compare `I_M(tau) = psi(tau, .)' Q_M mu` against the 200-point reference for
/// draws `mu ~ GP(0, sigma^2 R)`; returns median `R_M`, `S_M` per `M`.
pub fn quad_error_study<R: Rng + ?Sized>(
    kernel: &KernelSpec,
    nu: f64,
    sigma: f64,
    rho2: f64,
    m_list: &[usize],
    n_reps: usize,
    rng: &mut R,
) -> Result<Vec<QuadErrorRow>> {
    const REF: usize = 200;
    let reference = linspace(0.0, 1.0, REF);
    let grids: Vec<Vec<f64>> = m_list.iter().map(|&m| linspace(0.0, 1.0, m)).collect();
    let mut sets: Vec<&[f64]> = vec![&reference];
    sets.extend(grids.iter().map(|g| g.as_slice()));
    let all = EvaluationGrid::union(&sets)?;
    let ap = all.points();
    let locate = |g: &[f64]| g.iter().map(|&x| all.index_of(x)).collect::<Result<Vec<usize>>>();
    let ref_idx = locate(&reference)?;
    let idx: Vec<Vec<usize>> = grids.iter().map(|g| locate(g)).collect::<Result<_>>()?;
    // I_M at the reference points: psi(tau_ref, u_M) Q_M
    let operator = |g: &[f64]| -> Result<DMatrix<f64>> {
        let grid = EvaluationGrid::new(g.to_vec())?;
        let mut k = kernel.matrix(&reference, g);
        for (j, wj) in grid.weights().iter().enumerate() {
            k.column_mut(j).scale_mut(*wj);
        }
        Ok(k)
    };
    let ref_op = operator(&reference)?;
    let ops: Vec<DMatrix<f64>> = grids.iter().map(|g| operator(g)).collect::<Result<_>>()?;
    let ref_w = EvaluationGrid::new(reference.clone())?.weights().to_vec();
    let chol = matern_factor(ap, nu, rho2, sigma)?;

    let mut r_draws = vec![Vec::with_capacity(n_reps); m_list.len()];
    let mut s_draws = vec![Vec::with_capacity(n_reps); m_list.len()];
    for _ in 0..n_reps {
        let mu = lower_mul(&chol, &std_normal_vec(rng, ap.len()));
        let pick = |ix: &[usize]| DVector::from_iterator(ix.len(), ix.iter().map(|&i| mu[i]));
        let i_ref = &ref_op * pick(&ref_idx);
        for (k, (op, ix)) in ops.iter().zip(&idx).enumerate() {
            let i_m = op * pick(ix);
            let mut r = 0.0;
            let mut s = 0.0;
            for i in 0..REF {
                let d = i_ref[i] - i_m[i];
                if d != 0.0 {
                    r += ref_w[i] * (d / i_ref[i]).abs();
                    s += ref_w[i] * d * d / (sigma * sigma);
                }
            }
            r_draws[k].push(r);
            s_draws[k].push(s);
        }
    }
    Ok(m_list
        .iter()
        .enumerate()
        .map(|(k, &m)| QuadErrorRow {
            m,
            r: median(&r_draws[k]),
            s: median(&s_draws[k]),
        })
        .collect())
}
