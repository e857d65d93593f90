//! Forecast metrics, prediction bands, MCMC diagnostics and the rolling
//! forecast-study runner.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::far::{run_gibbs, FarConfig, ModelKind};
use crate::grid::ObservationSet;
use crate::rivals::RivalKind;
use crate::special::{median, quantile_sorted};

/// One forecast of one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub method: String,
    /// Observed times available when forecasting (relative to the window).
    pub origin: usize,
    pub horizon: usize,
    /// Forecast on the grid.
    pub forecast: DVector<f64>,
    /// Values being forecast, at grid indices `index`.
    pub truth: DVector<f64>,
    pub index: Vec<usize>,
}

impl ForecastRecord {
    fn squared_errors(&self) -> impl Iterator<Item = f64> + '_ {
        self.index
            .iter()
            .zip(self.truth.iter())
            .map(|(&i, y)| (y - self.forecast[i]).powi(2))
    }
}

fn sum_cells(records: &[ForecastRecord]) -> Result<(f64, usize)> {
    if records.is_empty() {
        return Err(Error::InsufficientData("no forecast records".into()));
    }
    let mut total = 0.0;
    let mut cells = 0;
    for r in records {
        if r.truth.len() != r.index.len() || r.index.iter().any(|&i| i >= r.forecast.len()) {
            return Err(Error::Dimension(format!("record at origin {} is not conformable", r.origin)));
        }
        total += r.squared_errors().sum::<f64>();
        cells += r.index.len();
    }
    if cells == 0 {
        return Err(Error::InsufficientData("records hold no observed cells".into()));
    }
    Ok((total, cells))
}

/// `(1 / n M) sum_h ||Y_{T+h} - Yhat_{T+h}||^2` over full-grid records.
pub fn msfe_e(records: &[ForecastRecord]) -> Result<f64> {
    let (total, cells) = sum_cells(records)?;
    Ok(total / cells as f64)
}

/// Root mean squared error over every observed (time, maturity) cell of
/// records sharing one horizon.
pub fn rmsfe(records: &[ForecastRecord]) -> Result<f64> {
    if let Some(r) = records.first() {
        if records.iter().any(|x| x.horizon != r.horizon) {
            return Err(Error::InvalidParameter("records mix horizons".into()));
        }
    }
    let (total, cells) = sum_cells(records)?;
    Ok((total / cells as f64).sqrt())
}

/// Mean squared difference of two kernels on the same grid.
pub fn mse_psi(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if estimate.shape() != truth.shape() || truth.is_empty() {
        return Err(Error::Dimension(format!(
            "kernel shapes {:?} and {:?}",
            estimate.shape(),
            truth.shape()
        )));
    }
    Ok((estimate - truth).map(|x| x * x).mean())
}

pub const MIN_BAND_DRAWS: usize = 1000;

/// Pointwise and simultaneous prediction bands on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bands {
    pub level: f64,
    pub mean: DVector<f64>,
    pub pointwise_lower: DVector<f64>,
    pub pointwise_upper: DVector<f64>,
    pub simultaneous_lower: DVector<f64>,
    pub simultaneous_upper: DVector<f64>,
}

/// Pointwise quantile bands and sup-t simultaneous bands, the latter widened
/// where needed to contain the former.
pub fn credible_bands(draws: &[DVector<f64>], level: f64) -> Result<Bands> {
    if draws.len() < MIN_BAND_DRAWS {
        return Err(Error::InsufficientData(format!(
            "{} draws, need {MIN_BAND_DRAWS}",
            draws.len()
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!("level {level} outside (0, 1)")));
    }
    let m = draws[0].len();
    if draws.iter().any(|d| d.len() != m) {
        return Err(Error::Dimension("draws differ in length".into()));
    }
    let n = draws.len() as f64;
    let mean = draws.iter().fold(DVector::zeros(m), |a, d| a + d) / n;
    let sd = DVector::from_fn(m, |i, _| {
        (draws.iter().map(|d| (d[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    });
    let (lo_p, hi_p) = ((1.0 - level) / 2.0, (1.0 + level) / 2.0);
    let mut pl = DVector::zeros(m);
    let mut pu = DVector::zeros(m);
    let mut col = vec![0.0; draws.len()];
    for i in 0..m {
        for (c, d) in col.iter_mut().zip(draws) {
            *c = d[i];
        }
        col.sort_by(f64::total_cmp);
        pl[i] = quantile_sorted(&col, lo_p);
        pu[i] = quantile_sorted(&col, hi_p);
    }
    let mut maxdev: Vec<f64> = draws
        .iter()
        .map(|d| {
            (0..m)
                .filter(|&i| sd[i] > 0.0)
                .map(|i| (d[i] - mean[i]).abs() / sd[i])
                .fold(0.0, f64::max)
        })
        .collect();
    maxdev.sort_by(f64::total_cmp);
    let crit = quantile_sorted(&maxdev, level);
    let sl = DVector::from_fn(m, |i, _| (mean[i] - crit * sd[i]).min(pl[i]));
    let su = DVector::from_fn(m, |i, _| (mean[i] + crit * sd[i]).max(pu[i]));
    Ok(Bands {
        level,
        mean,
        pointwise_lower: pl,
        pointwise_upper: pu,
        simultaneous_lower: sl,
        simultaneous_upper: su,
    })
}

/// Effective sample size by Geyer's initial positive sequence. A constant
/// chain has ESS 1.
pub fn effective_sample_size(chain: &[f64]) -> f64 {
    let n = chain.len();
    if n < 2 {
        return n as f64;
    }
    let mean = chain.iter().sum::<f64>() / n as f64;
    let d: Vec<f64> = chain.iter().map(|x| x - mean).collect();
    let acov = |k: usize| d[..n - k].iter().zip(&d[k..]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let g0 = acov(0);
    if !(g0 > 0.0) {
        return 1.0;
    }
    let mut tau = -1.0;
    let mut m = 0;
    while 2 * m + 1 < n {
        let pair = (acov(2 * m) + acov(2 * m + 1)) / g0;
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        m += 1;
    }
    n as f64 / tau.max(1.0 / n as f64)
}

/// Minimum and median ESS across the coordinates of a vector-valued chain.
pub fn ess_summary(trace: &[DVector<f64>]) -> (f64, f64) {
    if trace.is_empty() {
        return (0.0, 0.0);
    }
    let ess: Vec<f64> = (0..trace[0].len())
        .map(|i| effective_sample_size(&trace.iter().map(|v| v[i]).collect::<Vec<_>>()))
        .collect();
    (ess.iter().cloned().fold(f64::INFINITY, f64::min), median(&ess))
}

/// A method taking part in a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyMethod {
    /// The Bayesian FAR model.
    Far(FarConfig),
    Rival(RivalKind),
    /// Generator-side conditional mean (simulations only, one step).
    Oracle,
}

impl StudyMethod {
    pub fn id(&self) -> String {
        match self {
            Self::Far(c) => {
                let name = match c.model {
                    ModelKind::FdlmFar => "fdlm-far",
                    ModelKind::GpFar => "gp-far",
                };
                format!("{name}({})", c.p_max)
            }
            Self::Rival(k) => serde_json::to_value(k)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_else(|| format!("{k:?}")),
            Self::Oracle => "oracle".into(),
        }
    }
}

/// Rolling-origin protocol on one window of the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyProtocol {
    /// First time of the window.
    pub start: usize,
    /// Times used for parameter estimation.
    pub n_fit: usize,
    /// Times after the estimation period whose values are forecast.
    pub n_eval: usize,
    pub horizons: Vec<usize>,
    /// Refit rivals at every origin instead of freezing their coefficients
    /// at the end of the estimation period.
    pub refit: bool,
    pub seed: u64,
}

impl Default for StudyProtocol {
    fn default() -> Self {
        Self {
            start: 0,
            n_fit: 350,
            n_eval: 25,
            horizons: vec![1],
            refit: false,
            seed: 0,
        }
    }
}

impl StudyProtocol {
    pub fn validate(&self, n_times: usize) -> Result<()> {
        if self.n_fit < 2 || self.n_eval == 0 {
            return Err(Error::InvalidParameter("n_fit >= 2 and n_eval >= 1 required".into()));
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(Error::InvalidParameter("horizons must be nonempty and >= 1".into()));
        }
        if self.start + self.n_fit + self.n_eval > n_times {
            return Err(Error::InsufficientData(format!(
                "window {}..{} exceeds {n_times} times",
                self.start,
                self.start + self.n_fit + self.n_eval
            )));
        }
        Ok(())
    }

    /// Origins (observed times) whose `h`-step target lies in the evaluation period.
    pub fn origins(&self, h: usize) -> std::ops::Range<usize> {
        self.n_fit..(self.n_fit + self.n_eval + 1).saturating_sub(h).max(self.n_fit)
    }
}

/// Data and simulation-side references for a study.
#[derive(Debug, Clone, Copy)]
pub struct StudyInput<'a> {
    pub data: &'a ObservationSet,
    /// Latent curves on the grid per time; observed values are used otherwise.
    pub truth: Option<&'a [DVector<f64>]>,
    /// One-step oracle forecasts per time.
    pub oracle: Option<&'a [DVector<f64>]>,
    /// True lag-1 kernel on the grid.
    pub psi_truth: Option<&'a DMatrix<f64>>,
    /// Maturities in months per grid point.
    pub maturities: Option<&'a [f64]>,
}

impl<'a> StudyInput<'a> {
    pub fn new(data: &'a ObservationSet) -> Self {
        Self {
            data,
            truth: None,
            oracle: None,
            psi_truth: None,
            maturities: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub method: String,
    pub origin: Option<usize>,
    pub horizon: Option<usize>,
    pub message: String,
}

/// One row of a result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub window_start: usize,
    /// 0 for metrics without a horizon.
    pub horizon: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StudyOutput {
    pub records: Vec<ForecastRecord>,
    pub failures: Vec<CellFailure>,
    pub rows: Vec<ResultRow>,
    /// Estimated lag-1 kernels by method.
    pub kernels: Vec<(String, DMatrix<f64>)>,
    pub notes: Vec<(String, String)>,
}

#[derive(Default)]
struct MethodOutput {
    records: Vec<ForecastRecord>,
    failures: Vec<CellFailure>,
    kernel: Option<DMatrix<f64>>,
    notes: Vec<String>,
}

impl MethodOutput {
    fn fail(&mut self, method: &str, origin: Option<usize>, horizon: Option<usize>, e: &Error) {
        log::warn!("{method} failed at origin {origin:?} horizon {horizon:?}: {e}");
        self.failures.push(CellFailure {
            method: method.into(),
            origin,
            horizon,
            message: e.to_string(),
        });
    }
}

fn window(data: &ObservationSet, p: &StudyProtocol) -> ObservationSet {
    ObservationSet {
        grid: data.grid.clone(),
        times: data.times[p.start..p.start + p.n_fit + p.n_eval].to_vec(),
    }
}

/// Target of an `h`-step forecast from `origin`: `(values, grid indices)`,
/// `None` when nothing was observed.
fn target(input: &StudyInput, p: &StudyProtocol, origin: usize, h: usize) -> Option<(DVector<f64>, Vec<usize>)> {
    let t = p.start + origin + h - 1;
    match input.truth {
        Some(tr) => Some((tr[t].clone(), (0..tr[t].len()).collect())),
        None => {
            let o = &input.data.times[t];
            (!o.is_empty()).then(|| (o.values.clone(), o.incidence.index.clone()))
        }
    }
}

fn seed_for(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

fn run_method(input: &StudyInput, p: &StudyProtocol, method: &StudyMethod, index: usize) -> MethodOutput {
    let id = method.id();
    let mut out = MethodOutput::default();
    let win = window(input.data, p);
    let record = |origin: usize, h: usize, forecast: DVector<f64>| {
        target(input, p, origin, h).map(|(truth, idx)| ForecastRecord {
            method: id.clone(),
            origin,
            horizon: h,
            forecast,
            truth,
            index: idx,
        })
    };
    match method {
        StudyMethod::Oracle => {
            let Some(oracle) = input.oracle else {
                out.fail(&id, None, None, &Error::InvalidParameter("no oracle forecasts".into()));
                return out;
            };
            for &h in &p.horizons {
                if h != 1 {
                    out.fail(&id, None, Some(h), &Error::InvalidParameter("oracle is one-step".into()));
                    continue;
                }
                for origin in p.origins(h) {
                    out.records.extend(record(origin, h, oracle[p.start + origin].clone()));
                }
            }
        }
        StudyMethod::Far(cfg) => {
            let mut cfg = cfg.clone();
            cfg.n_fit = Some(p.n_fit);
            cfg.horizons = p.horizons.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed_for(p.seed, index));
            match run_gibbs(&win, &cfg, &mut rng) {
                Err(e) => out.fail(&id, None, None, &e),
                Ok(draws) => {
                    for &h in &p.horizons {
                        let Some(series) = draws.forecast(h) else { continue };
                        let valid = p.origins(h);
                        for (origin, f) in series.origins.iter().zip(&series.mean) {
                            if valid.contains(origin) {
                                out.records.extend(record(*origin, h, f.clone()));
                            }
                        }
                    }
                    out.kernel = draws.psi_mean.first().cloned();
                    out.notes.push(format!("factors {}", draws.n_factors));
                    out.notes.push(format!("p* mode {}", draws.p_star_mode()));
                }
            }
        }
        StudyMethod::Rival(kind) => {
            let forecaster = match kind.build(input.maturities) {
                Ok(f) => f,
                Err(e) => {
                    out.fail(&id, None, None, &e);
                    return out;
                }
            };
            let base = match forecaster.fit(&win.truncated(p.n_fit)) {
                Ok(f) => Some(f),
                Err(e) => {
                    out.fail(&id, Some(p.n_fit), None, &e);
                    None
                }
            };
            if let Some(b) = &base {
                out.kernel = b.kernel();
                out.notes.extend(b.notes());
            }
            let cells: Vec<(usize, usize)> = p
                .horizons
                .iter()
                .flat_map(|&h| p.origins(h).map(move |o| (o, h)))
                .collect();
            let results: Vec<(usize, usize, Result<DVector<f64>>)> = cells
                .par_iter()
                .map(|&(origin, h)| {
                    let hist = win.truncated(origin);
                    let f = if p.refit {
                        forecaster.fit(&hist).and_then(|f| f.forecast_from(&hist, h))
                    } else {
                        match &base {
                            Some(b) => b.forecast_from(&hist, h),
                            None => Err(Error::InvalidParameter("estimation failed".into())),
                        }
                    };
                    (origin, h, f)
                })
                .collect();
            if base.is_some() || p.refit {
                for (origin, h, f) in results {
                    match f {
                        Ok(f) => out.records.extend(record(origin, h, f)),
                        Err(e) => out.fail(&id, Some(origin), Some(h), &e),
                    }
                }
            }
        }
    }
    out
}

/// Evaluate every method on one window. Failures are recorded per cell and
/// never abort the study; identical inputs give identical output.
pub fn run_study(input: &StudyInput, methods: &[StudyMethod], protocol: &StudyProtocol) -> Result<StudyOutput> {
    protocol.validate(input.data.len())?;
    let n = input.data.len();
    if input.truth.is_some_and(|t| t.len() < n) || input.oracle.is_some_and(|o| o.len() < n) {
        return Err(Error::Dimension("truth or oracle shorter than the data".into()));
    }
    let outputs: Vec<MethodOutput> = methods
        .par_iter()
        .enumerate()
        .map(|(i, m)| run_method(input, protocol, m, i))
        .collect();
    let mut study = StudyOutput::default();
    for (m, o) in methods.iter().zip(outputs) {
        let id = m.id();
        let row = |horizon: usize, metric: &str, value: f64| ResultRow {
            method: id.clone(),
            window_start: protocol.start,
            horizon,
            metric: metric.into(),
            value,
        };
        for &h in &protocol.horizons {
            let recs: Vec<ForecastRecord> = o.records.iter().filter(|r| r.horizon == h).cloned().collect();
            if let Ok(msfe) = msfe_e(&recs) {
                study.rows.push(row(h, "msfe", msfe));
                study.rows.push(row(h, "rmsfe", msfe.sqrt()));
            }
            study.rows.push(row(h, "records", recs.len() as f64));
            let failed = o.failures.iter().filter(|f| f.horizon.is_none_or(|x| x == h)).count();
            study.rows.push(row(h, "failures", failed as f64));
        }
        if let (Some(k), Some(truth)) = (&o.kernel, input.psi_truth) {
            if let Ok(v) = mse_psi(k, truth) {
                study.rows.push(row(0, "mse_psi", v));
            }
        }
        if let Some(k) = o.kernel {
            study.kernels.push((id.clone(), k));
        }
        study.notes.extend(o.notes.into_iter().map(|n| (id.clone(), n)));
        study.records.extend(o.records);
        study.failures.extend(o.failures);
    }
    Ok(study)
}

/// Median of a metric across replicate studies, per method.
pub fn median_by_method(rows: &[ResultRow], metric: &str, horizon: usize) -> Vec<(String, f64)> {
    let mut methods: Vec<String> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    methods
        .into_iter()
        .filter_map(|m| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == m && r.metric == metric && r.horizon == horizon)
                .map(|r| r.value)
                .collect();
            (!v.is_empty()).then(|| (m, median(&v)))
        })
        .collect()
}
