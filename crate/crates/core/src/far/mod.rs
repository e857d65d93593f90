//! Hierarchical FAR(p) model and its Gibbs sampler.
//!
//! A sweep updates, in order: the latent states `{mu_t}` jointly through the
//! simulation smoother, the mean function, the measurement precision, the
//! kernel coefficients with their scale/precision auxiliaries and the lag
//! inclusion states, then the innovation covariance (factor model or Matérn).
//! Parameters only see the first `n_fit` times; later times enter the filter
//! that produces out-of-sample forecasts.

pub mod blocks;
pub mod init;
pub mod kernels;
pub mod matern;
pub mod slice;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{BsplineBasis, ThinPlateBasis};
use crate::error::{Error, Result};
use crate::fdlm::FdlmCovariance;
use crate::grid::ObservationSet;
use crate::linalg::{cholesky_jitter, lower_mul, std_normal_vec};
use crate::ssm::{propagate_mean, Observations, SimulationSmoother, StateSpaceSpec};

pub use kernels::{KernelSetup, KernelStats, LagKernel};
pub use matern::MaternCov;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Innovation covariance from the functional factor model.
    FdlmFar,
    /// Parametric Matérn innovation covariance.
    GpFar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NuggetMode {
    Sampled,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KappaMode {
    /// `kappa = 1`.
    Fixed,
    /// `log kappa ~ N(0, 4)`, slice sampled.
    LogNormal,
}

/// Markov prior on lag inclusion indicators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LagPrior {
    /// `P(s_l = 1 | s_{l-1} = 0)`.
    pub q01: f64,
    /// `P(s_l = 0 | s_{l-1} = 1)`.
    pub q10: f64,
    /// `P(s_1 = 1)`.
    pub p1: f64,
}

impl Default for LagPrior {
    fn default() -> Self {
        Self {
            q01: 0.01,
            q10: 0.75,
            p1: 0.9,
        }
    }
}

impl LagPrior {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("q01", self.q01), ("q10", self.q10), ("p1", self.p1)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParameter(format!("lag_prior.{name} = {v} not in [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FarConfig {
    pub model: ModelKind,
    /// Largest lag considered.
    pub p_max: usize,
    /// Sample inclusion states; when false every lag up to `p_max` stays in.
    pub select_lags: bool,
    pub lag_prior: LagPrior,
    pub burn: usize,
    pub iters: usize,
    pub thin: usize,
    /// Iterations at the start with every lag forced in.
    pub lag_burn: usize,
    /// Number of factors; `None` picks the 95% rule at initialization.
    pub n_factors: Option<usize>,
    pub nugget: NuggetMode,
    pub kappa: KappaMode,
    /// Matérn smoothness for the GP variant.
    pub matern_nu: f64,
    /// Interior knots of the kernel marginal basis; default from the observed points.
    pub kernel_knots: Option<usize>,
    /// Thin plate knots for the mean and loading curves.
    pub flc_knots: Option<usize>,
    /// Times used for parameter updates; `None` uses all.
    pub n_fit: Option<usize>,
    /// Forecast horizons recorded at every origin from `n_fit` to the end of the data.
    pub horizons: Vec<usize>,
    /// Keep predictive draws of `y` at the final origin.
    pub predictive_draws: bool,
    /// Keep the posterior mean of the latent states.
    pub store_states: bool,
}

impl Default for FarConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::FdlmFar,
            p_max: 1,
            select_lags: false,
            lag_prior: LagPrior::default(),
            burn: 5000,
            iters: 5000,
            thin: 1,
            lag_burn: 500,
            n_factors: None,
            nugget: NuggetMode::Sampled,
            kappa: KappaMode::Fixed,
            matern_nu: 2.5,
            kernel_knots: None,
            flc_knots: None,
            n_fit: None,
            horizons: vec![1],
            predictive_draws: false,
            store_states: false,
        }
    }
}

impl FarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p_max == 0 {
            return Err(Error::InvalidParameter("p_max must be >= 1".into()));
        }
        if self.iters == 0 || self.thin == 0 {
            return Err(Error::InvalidParameter("iters and thin must be >= 1".into()));
        }
        if self.horizons.contains(&0) {
            return Err(Error::InvalidParameter("horizons must be >= 1".into()));
        }
        if !(self.matern_nu > 0.0) {
            return Err(Error::InvalidParameter("matern_nu must be positive".into()));
        }
        self.lag_prior.validate()
    }
}

/// Innovation covariance parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Innovation {
    Fdlm {
        cov: FdlmCovariance,
        /// Factor scores, `J x T'`.
        factors: DMatrix<f64>,
    },
    Matern {
        cov: MaternCov,
        upper: f64,
    },
}

/// Every unknown of the model at one point of the chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    /// Centered latent curves on the grid for the fitting times.
    pub states: Vec<DVector<f64>>,
    pub theta_mu: DVector<f64>,
    pub lambda_mu: f64,
    pub sigma_nu2: f64,
    pub lags: Vec<LagKernel>,
    pub innovation: Innovation,
}

/// Fixed design pieces shared across iterations.
#[derive(Debug, Clone)]
pub struct FarModel {
    pub config: FarConfig,
    pub obs: Observations,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
    pub n_fit: usize,
    pub kernel: KernelSetup,
    pub thin_plate: ThinPlateBasis,
    /// Thin plate design on the grid, `M x J_phi`.
    pub bphi: DMatrix<f64>,
}

impl FarModel {
    pub fn new(data: &ObservationSet, config: &FarConfig) -> Result<Self> {
        config.validate()?;
        let obs = Observations::from_set(data);
        let n_fit = config.n_fit.unwrap_or(data.len()).min(data.len());
        if n_fit < config.p_max + 2 {
            return Err(Error::InsufficientData(format!(
                "{n_fit} fitting times for p_max = {}",
                config.p_max
            )));
        }
        let fit_set = data.truncated(n_fit);
        if fit_set.n_obs() == 0 {
            return Err(Error::InsufficientData("no observations in the fitting period".into()));
        }
        let observed = fit_set.observed_points();
        let kernel_knots = config
            .kernel_knots
            .unwrap_or_else(|| BsplineBasis::default_interior(observed.len()));
        let kernel = KernelSetup::new(&data.grid, kernel_knots)?;
        let n_knots = config
            .flc_knots
            .unwrap_or_else(|| ThinPlateBasis::default_knots(observed.len()))
            .min(observed.len());
        let thin_plate = ThinPlateBasis::new(&observed, n_knots)?;
        let bphi = thin_plate.design(data.grid.points());
        Ok(Self {
            config: config.clone(),
            obs,
            points: data.grid.points().to_vec(),
            weights: data.grid.weights().to_vec(),
            n_fit,
            kernel,
            thin_plate,
            bphi,
        })
    }

    pub fn grid_len(&self) -> usize {
        self.points.len()
    }

    pub fn total_times(&self) -> usize {
        self.obs.len()
    }

    /// First zero-based time entering the kernel and innovation likelihoods.
    pub fn first_term(&self) -> usize {
        self.config.p_max
    }

    pub fn mean_on_grid(&self, state: &ModelState) -> DVector<f64> {
        &self.bphi * &state.theta_mu
    }

    pub fn innovation_cov(&self, state: &ModelState) -> Result<DMatrix<f64>> {
        match &state.innovation {
            Innovation::Fdlm { cov, .. } => cov.covariance(),
            Innovation::Matern { cov, .. } => Ok(cov.covariance(&self.points)),
        }
    }

    pub fn innovation_precision(&self, state: &ModelState) -> Result<DMatrix<f64>> {
        match &state.innovation {
            Innovation::Fdlm { cov, .. } => cov.precision(),
            Innovation::Matern { cov, .. } => {
                let chol = cholesky_jitter(&cov.correlation(&self.points))?;
                Ok(chol.inverse() / cov.sigma2)
            }
        }
    }

    /// State-space form of the current parameters.
    pub fn state_space(&self, state: &ModelState) -> Result<StateSpaceSpec> {
        let blocks = kernels::evolution_blocks(&self.kernel, &state.lags, &self.weights);
        StateSpaceSpec::far(
            blocks,
            self.innovation_cov(state)?,
            state.sigma_nu2,
            self.mean_on_grid(state),
        )
    }
}

/// Posterior mean forecasts at every origin for one horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSeries {
    pub horizon: usize,
    /// Number of observed times at each origin.
    pub origins: Vec<usize>,
    /// Posterior mean of `Y_{origin + h}` on the grid (`mu + mu_t`).
    pub mean: Vec<DVector<f64>>,
}

/// Retained output of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsDraws {
    pub grid: Vec<f64>,
    pub n_fit: usize,
    pub kept: usize,
    pub n_factors: usize,
    pub kernel_dim: usize,
    /// Posterior mean of `s_l psi_l` on the grid, per lag.
    pub psi_mean: Vec<DMatrix<f64>>,
    pub mean_function: DVector<f64>,
    pub inclusion: Vec<Vec<bool>>,
    pub p_star: Vec<usize>,
    pub sigma_nu2: Vec<f64>,
    pub sigma_eta2: Vec<f64>,
    pub factor_var: Vec<Vec<f64>>,
    pub lambda_psi: Vec<Vec<f64>>,
    pub kappa: Vec<Vec<f64>>,
    /// `(s2, rho2)` per draw in the GP variant.
    pub matern: Vec<(f64, f64)>,
    pub forecasts: Vec<ForecastSeries>,
    /// Per-draw forecast of the first horizon at the first origin.
    pub trace: Vec<DVector<f64>>,
    /// Predictive draws of `y` at the final origin, indexed `[horizon][draw]`.
    pub predictive: Vec<Vec<DVector<f64>>>,
    pub state_mean: Option<Vec<DVector<f64>>>,
}

impl GibbsDraws {
    fn new(model: &FarModel) -> Self {
        let m = model.grid_len();
        let cfg = &model.config;
        let origins: Vec<usize> = (model.n_fit..=model.total_times()).collect();
        Self {
            grid: model.points.clone(),
            n_fit: model.n_fit,
            kept: 0,
            n_factors: 0,
            kernel_dim: model.kernel.marginal_dim(),
            psi_mean: vec![DMatrix::zeros(m, m); cfg.p_max],
            mean_function: DVector::zeros(m),
            inclusion: Vec::new(),
            p_star: Vec::new(),
            sigma_nu2: Vec::new(),
            sigma_eta2: Vec::new(),
            factor_var: Vec::new(),
            lambda_psi: Vec::new(),
            kappa: Vec::new(),
            matern: Vec::new(),
            forecasts: cfg
                .horizons
                .iter()
                .map(|&h| ForecastSeries {
                    horizon: h,
                    origins: origins.clone(),
                    mean: vec![DVector::zeros(m); origins.len()],
                })
                .collect(),
            trace: Vec::new(),
            predictive: if cfg.predictive_draws {
                vec![Vec::new(); cfg.horizons.len()]
            } else {
                Vec::new()
            },
            state_mean: if cfg.store_states {
                Some(vec![DVector::zeros(m); model.n_fit])
            } else {
                None
            },
        }
    }

    fn record_parameters(&mut self, model: &FarModel, state: &ModelState) {
        for (l, lag) in state.lags.iter().enumerate() {
            if lag.included {
                self.psi_mean[l] += model.kernel.psi(&lag.theta());
            }
        }
        self.mean_function += model.mean_on_grid(state);
        self.inclusion.push(state.lags.iter().map(|l| l.included).collect());
        self.p_star.push(kernels::effective_order(&state.lags));
        self.sigma_nu2.push(state.sigma_nu2);
        self.lambda_psi.push(state.lags.iter().map(|l| l.lambda()).collect());
        self.kappa.push(state.lags.iter().map(|l| l.kappa).collect());
        match &state.innovation {
            Innovation::Fdlm { cov, .. } => {
                self.n_factors = cov.n_factors();
                self.sigma_eta2.push(cov.sigma_eta2);
                self.factor_var.push(cov.sigma2.iter().copied().collect());
            }
            Innovation::Matern { cov, .. } => self.matern.push((cov.sigma2, cov.rho2)),
        }
        if let Some(sm) = self.state_mean.as_mut() {
            for (acc, x) in sm.iter_mut().zip(&state.states) {
                *acc += x;
            }
        }
        self.kept += 1;
    }

    fn record_forecasts<R: Rng + ?Sized>(
        &mut self,
        model: &FarModel,
        sim: &SimulationSmoother,
        state: &ModelState,
        rng: &mut R,
    ) -> Result<()> {
        if self.forecasts.is_empty() {
            return Ok(());
        }
        let spec = sim.spec();
        let m = model.grid_len();
        let means = sim.filter_means(&model.obs.values)?;
        let n = spec.state_dim();
        for (hi, series) in self.forecasts.iter_mut().enumerate() {
            for (k, &o) in series.origins.iter().enumerate() {
                let start = if o == 0 { DVector::zeros(n) } else { means.m[o - 1].clone() };
                let ahead = propagate_mean(spec, &start, series.horizon);
                let f = ahead.rows(0, m) + &spec.offset;
                if hi == 0 && k == 0 {
                    self.trace.push(f.clone());
                }
                series.mean[k] += f;
            }
        }
        if !self.predictive.is_empty() {
            let last = model.total_times();
            let (mut x, c) = if last == 0 {
                (DVector::zeros(n), spec.init_cov.clone())
            } else {
                (means.m[last - 1].clone(), sim.cov.c[last - 1].clone())
            };
            let lc = cholesky_jitter(&c)?.l();
            x += lower_mul(&lc, &std_normal_vec(rng, n));
            let lw = cholesky_jitter(&spec.state_cov)?.l();
            let sd = state.sigma_nu2.sqrt();
            let hmax = *model.config.horizons.iter().max().unwrap_or(&0);
            let mut path = Vec::with_capacity(hmax);
            for _ in 0..hmax {
                x = spec.apply_g_vec(&x);
                let w = lower_mul(&lw, &std_normal_vec(rng, m));
                let mut head = x.rows_mut(0, m);
                head += w;
                let y = x.rows(0, m) + &spec.offset + std_normal_vec(rng, m) * sd;
                path.push(y);
            }
            for (hi, &h) in model.config.horizons.iter().enumerate() {
                self.predictive[hi].push(path[h - 1].clone());
            }
        }
        Ok(())
    }

    fn finish(&mut self) {
        let k = self.kept.max(1) as f64;
        for p in &mut self.psi_mean {
            *p /= k;
        }
        self.mean_function /= k;
        for s in &mut self.forecasts {
            for v in &mut s.mean {
                *v /= k;
            }
        }
        if let Some(sm) = self.state_mean.as_mut() {
            for v in sm {
                *v /= k;
            }
        }
    }

    /// Posterior mode of the effective order `p*`.
    pub fn p_star_mode(&self) -> usize {
        let maxp = self.p_star.iter().copied().max().unwrap_or(0);
        let mut counts = vec![0usize; maxp + 1];
        for &p in &self.p_star {
            counts[p] += 1;
        }
        counts
            .iter()
            .enumerate()
            .max_by_key(|(p, c)| (**c, std::cmp::Reverse(*p)))
            .map_or(0, |(p, _)| p)
    }

    /// Posterior inclusion frequency of each lag.
    pub fn inclusion_frequency(&self) -> Vec<f64> {
        let p = self.psi_mean.len();
        let n = self.inclusion.len().max(1) as f64;
        (0..p)
            .map(|l| self.inclusion.iter().filter(|s| s[l]).count() as f64 / n)
            .collect()
    }

    pub fn forecast(&self, horizon: usize) -> Option<&ForecastSeries> {
        self.forecasts.iter().find(|s| s.horizon == horizon)
    }
}

/// One full sweep of every block, in order.
pub fn sweep<R: Rng + ?Sized>(
    model: &FarModel,
    state: &mut ModelState,
    sim: &SimulationSmoother,
    iter: usize,
    rng: &mut R,
) -> Result<()> {
    let cfg = &model.config;
    state.states = sim.draw(&model.obs.values[..model.n_fit], rng)?;
    blocks::sample_mean_function(model, state, rng)?;
    blocks::sample_obs_variance(model, state, rng)?;
    let kinv = model.innovation_precision(state)?;
    let stats = KernelStats::new(&model.kernel, &state.states, cfg.p_max, &kinv);
    kernels::sample_theta_tilde(&model.kernel, &stats, &mut state.lags, rng)?;
    kernels::sample_scales(&model.kernel, &stats, &mut state.lags, cfg.kappa == KappaMode::LogNormal, rng)?;
    if cfg.select_lags && iter >= cfg.lag_burn {
        kernels::sample_lag_states(&model.kernel, &stats, &mut state.lags, &cfg.lag_prior, rng);
    }
    blocks::sample_innovation(model, state, rng)
}

/// Run one chain: initialize, burn in, and keep `iters / thin` draws.
pub fn run_gibbs<R: Rng + ?Sized>(data: &ObservationSet, config: &FarConfig, rng: &mut R) -> Result<GibbsDraws> {
    let model = FarModel::new(data, config)?;
    let mut state = init::initialize(&model)?;
    run_chain(&model, &mut state, rng)
}

/// Run the sampler from a given state.
pub fn run_chain<R: Rng + ?Sized>(model: &FarModel, state: &mut ModelState, rng: &mut R) -> Result<GibbsDraws> {
    let cfg = &model.config;
    let mut out = GibbsDraws::new(model);
    let total = cfg.burn + cfg.iters;
    let mut pending = false;
    for iter in 0..total {
        let spec = model.state_space(state)?;
        let sim = SimulationSmoother::new(&spec, &model.obs.index)?;
        if pending {
            out.record_forecasts(model, &sim, state, rng)?;
            pending = false;
        }
        sweep(model, state, &sim, iter, rng)?;
        if iter >= cfg.burn && (iter - cfg.burn) % cfg.thin == 0 {
            out.record_parameters(model, state);
            pending = true;
        }
        if iter % 1000 == 999 {
            log::debug!("iteration {}/{}", iter + 1, total);
        }
    }
    if pending {
        let spec = model.state_space(state)?;
        let sim = SimulationSmoother::new(&spec, &model.obs.index)?;
        out.record_forecasts(model, &sim, state, rng)?;
    }
    out.finish();
    Ok(out)
}
