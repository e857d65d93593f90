//! Competing forecasters: random walk, mean, VAR on the data, pointwise
//! exponential smoothing, FPC-based FAR and VAR, and Nelson-Siegel models.

pub mod fpc;
pub mod ns;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::BsplineBasis;
use crate::error::{Error, Result};
use crate::grid::ObservationSet;
use crate::linalg::cholesky_jitter;

pub use fpc::{EstimatedKernelFar, FpcDecomposition, VarFpc};
pub use ns::{DynamicNelsonSiegel, NelsonSiegelTwoStep};

/// Interior knots of the presmoothing and mean bases.
pub const SMOOTH_KNOTS: usize = 8;
/// Ridge used when a VAR has fewer equations than coefficients.
pub const VAR_RIDGE: f64 = 1e-4;

/// A method fitted to a history, able to forecast ahead of its last time.
pub trait Fitted: Send + Sync {
    /// Forecast of `y_{T+h}` on the evaluation grid.
    fn predict(&self, h: usize) -> Result<DVector<f64>>;

    /// Estimated lag-1 kernel on the grid, when the method has one.
    fn kernel(&self) -> Option<DMatrix<f64>> {
        None
    }

    /// Free-form fit metadata (fallbacks taken, instability).
    fn notes(&self) -> Vec<String> {
        Vec::new()
    }

    /// Centered `h`-step forecast from a supplied history of centered inputs,
    /// with every fitted coefficient frozen. Inputs are in the method's own
    /// coordinates (`input_dim`), oldest first.
    fn predict_centered(&self, recent: &[DVector<f64>], h: usize) -> Result<DVector<f64>>;

    fn input_dim(&self) -> usize;

    /// Forecast `h` steps past the end of `history` (which extends the
    /// training data) with every fitted coefficient frozen.
    fn forecast_from(&self, history: &ObservationSet, h: usize) -> Result<DVector<f64>>;
}

pub trait Forecaster: Send + Sync {
    fn id(&self) -> String;
    fn fit(&self, history: &ObservationSet) -> Result<Box<dyn Fitted>>;
}

/// Rival methods by name, as used in study configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RivalKind {
    Rw,
    Mean,
    VarY,
    Ses,
    FarClassic,
    VarFpc,
    Dl,
    DlDiagonal,
    Dra,
}

impl RivalKind {
    /// `maturities` (months) are required by the Nelson-Siegel methods.
    pub fn build(self, maturities: Option<&[f64]>) -> Result<Box<dyn Forecaster>> {
        let need = || {
            maturities
                .map(|m| m.to_vec())
                .ok_or_else(|| Error::InvalidParameter(format!("{self:?} needs maturities")))
        };
        Ok(match self {
            Self::Rw => Box::new(RandomWalk),
            Self::Mean => Box::new(MeanForecast),
            Self::VarY => Box::new(VarY),
            Self::Ses => Box::new(Ses),
            Self::FarClassic => Box::new(EstimatedKernelFar),
            Self::VarFpc => Box::new(VarFpc),
            Self::Dl => Box::new(NelsonSiegelTwoStep::new(need()?, false)),
            Self::DlDiagonal => Box::new(NelsonSiegelTwoStep::new(need()?, true)),
            Self::Dra => Box::new(DynamicNelsonSiegel::new(need()?)),
        })
    }
}

fn check_h(h: usize) -> Result<()> {
    if h == 0 {
        return Err(Error::InvalidParameter("horizon must be >= 1".into()));
    }
    Ok(())
}

/// Linear interpolation of one curve onto the grid, nearest-value extrapolation.
pub fn interpolate(points: &[f64], values: &[f64], grid: &[f64]) -> Option<DVector<f64>> {
    if points.is_empty() {
        return None;
    }
    Some(DVector::from_iterator(
        grid.len(),
        grid.iter().map(|&x| {
            let k = points.partition_point(|&p| p < x);
            if k == 0 {
                values[0]
            } else if k == points.len() {
                values[k - 1]
            } else {
                let (x0, x1) = (points[k - 1], points[k]);
                let w = (x - x0) / (x1 - x0);
                values[k - 1] * (1.0 - w) + values[k] * w
            }
        }),
    ))
}

/// Every curve interpolated onto the grid; an empty time repeats the
/// previous completed curve (or the next one at the start).
pub fn complete_curves(data: &ObservationSet) -> Result<Vec<DVector<f64>>> {
    let grid = data.grid.points();
    let raw: Vec<Option<DVector<f64>>> = data
        .times
        .iter()
        .map(|o| interpolate(&o.points, o.values.as_slice(), grid))
        .collect();
    let first = raw
        .iter()
        .flatten()
        .next()
        .cloned()
        .ok_or_else(|| Error::InsufficientData("no observations".into()))?;
    let mut prev = first;
    Ok(raw
        .into_iter()
        .map(|c| {
            if let Some(c) = c {
                prev = c;
            }
            prev.clone()
        })
        .collect())
}

/// Grid indices shared by every time when the design is fixed.
pub fn fixed_design(data: &ObservationSet) -> Option<Vec<usize>> {
    let first = &data.times.first()?.incidence.index;
    if first.is_empty() {
        return None;
    }
    data.times.iter().all(|o| &o.incidence.index == first).then(|| first.clone())
}

fn smoothing_basis(data: &ObservationSet) -> Result<BsplineBasis> {
    let g = data.grid.points();
    BsplineBasis::uniform(SMOOTH_KNOTS, g[0], g[g.len() - 1])
}

/// Cubic spline through values at a subset of grid points, evaluated on the
/// whole grid; the basis has at most as many functions as points.
#[derive(Debug, Clone)]
pub struct SplineMap {
    /// Grid evaluation times least-squares solve, `M x m`.
    pub map: DMatrix<f64>,
}

impl SplineMap {
    pub fn new(points: &[f64], grid: &[f64]) -> Result<Self> {
        let n = points.len();
        if n < 2 {
            return Err(Error::InsufficientData("spline needs two points".into()));
        }
        let lo = grid[0].min(points[0]);
        let hi = grid[grid.len() - 1].max(points[n - 1]);
        if n < 4 {
            // piecewise linear for very few points
            let map = DMatrix::from_fn(grid.len(), n, |i, j| {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                interpolate(points, &e, &grid[i..=i]).unwrap()[0]
            });
            return Ok(Self { map });
        }
        let basis = BsplineBasis::uniform((n - 4).min(SMOOTH_KNOTS), lo, hi)?;
        let b = basis.eval(points)?;
        let g = basis.eval(grid)?;
        let lhs = b.transpose() * &b;
        let chol = cholesky_jitter(&lhs)?;
        let solve = chol.solve(&b.transpose());
        Ok(Self { map: g * solve })
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.map * v
    }
}

/// Least-squares VAR(1) `x_t = c + A x_{t-1} + e_t`.
#[derive(Debug, Clone)]
pub struct Var1 {
    pub a: DMatrix<f64>,
    pub c: DVector<f64>,
    /// Ridge fallback was used.
    pub ridged: bool,
}

impl Var1 {
    pub fn fit(series: &[DVector<f64>], intercept: bool, diagonal: bool) -> Result<Self> {
        let n = series.len();
        if n < 2 {
            return Err(Error::InsufficientData("VAR(1) needs two observations".into()));
        }
        let k = series[0].len();
        if diagonal {
            let mut a = DMatrix::zeros(k, k);
            let mut c = DVector::zeros(k);
            for i in 0..k {
                let x: Vec<f64> = series[..n - 1].iter().map(|v| v[i]).collect();
                let y: Vec<f64> = series[1..].iter().map(|v| v[i]).collect();
                let (ai, ci) = scalar_ar(&x, &y, intercept);
                a[(i, i)] = ai;
                c[i] = ci;
            }
            return Ok(Self { a, c, ridged: false });
        }
        let off = intercept as usize;
        let p = k + off;
        let mut xtx = DMatrix::zeros(p, p);
        let mut xty = DMatrix::zeros(p, k);
        let mut row = DVector::zeros(p);
        for t in 1..n {
            if intercept {
                row[0] = 1.0;
            }
            row.rows_mut(off, k).copy_from(&series[t - 1]);
            xtx.ger(1.0, &row, &row, 1.0);
            xty.ger(1.0, &row, &series[t], 1.0);
        }
        let ridged = n - 1 <= p;
        let mut lhs = xtx.clone();
        if ridged {
            for i in off..p {
                lhs[(i, i)] += VAR_RIDGE;
            }
        }
        let coef = match lhs.clone().cholesky() {
            Some(ch) => ch.solve(&xty),
            None => {
                for i in off..p {
                    lhs[(i, i)] += VAR_RIDGE;
                }
                let coef = cholesky_jitter(&lhs)?.solve(&xty);
                return Ok(Self::from_coef(&coef, intercept, k, true));
            }
        };
        Ok(Self::from_coef(&coef, intercept, k, ridged))
    }

    fn from_coef(coef: &DMatrix<f64>, intercept: bool, k: usize, ridged: bool) -> Self {
        let off = intercept as usize;
        let a = coef.rows(off, k).transpose();
        let c = if intercept {
            coef.row(0).transpose()
        } else {
            DVector::zeros(k)
        };
        Self { a, c, ridged }
    }

    pub fn step(&self, x: &DVector<f64>, h: usize) -> DVector<f64> {
        let mut x = x.clone();
        for _ in 0..h {
            x = &self.a * x + &self.c;
        }
        x
    }

    fn step_centered(&self, x: &DVector<f64>, h: usize) -> DVector<f64> {
        let mut x = x.clone();
        for _ in 0..h {
            x = &self.a * x;
        }
        x
    }
}

fn scalar_ar(x: &[f64], y: &[f64], intercept: bool) -> (f64, f64) {
    let n = x.len() as f64;
    if intercept {
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let a = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        (a, my - a * mx)
    } else {
        let sxx: f64 = x.iter().map(|v| v * v).sum();
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        (if sxx > 0.0 { sxy / sxx } else { 0.0 }, 0.0)
    }
}

fn last(recent: &[DVector<f64>]) -> Result<&DVector<f64>> {
    recent.last().ok_or_else(|| Error::InsufficientData("empty history".into()))
}

/// `y_{T+h} = y_T` (completed onto the grid).
#[derive(Debug, Clone, Copy)]
pub struct RandomWalk;

struct RwFit {
    last: DVector<f64>,
}

impl Forecaster for RandomWalk {
    fn id(&self) -> String {
        "rw".into()
    }

    fn fit(&self, history: &ObservationSet) -> Result<Box<dyn Fitted>> {
        if history.is_empty() {
            return Err(Error::InsufficientData("random walk needs one curve".into()));
        }
        let curves = complete_curves(history)?;
        Ok(Box::new(RwFit {
            last: curves[curves.len() - 1].clone(),
        }))
    }
}

impl Fitted for RwFit {
    fn predict(&self, h: usize) -> Result<DVector<f64>> {
        check_h(h)?;
        Ok(self.last.clone())
    }

    fn predict_centered(&self, recent: &[DVector<f64>], h: usize) -> Result<DVector<f64>> {
        check_h(h)?;
        Ok(last(recent)?.clone())
    }

    fn forecast_from(&self, history: &ObservationSet, h: usize) -> Result<DVector<f64>> {
        check_h(h)?;
        let mut curves = complete_curves(history)?;
        Ok(curves.pop().expect("nonempty"))
    }

    fn input_dim(&self) -> usize {
        self.last.len()
    }
}

/// Pooled B-spline least-squares mean of all observations.
#[derive(Debug, Clone, Copy)]
pub struct MeanForecast;

struct MeanFit {
    mean: DVector<f64>,
}

/// Pooled least-squares mean curve on the grid.
pub fn pooled_mean(data: &ObservationSet) -> Result<DVector<f64>> {
    let basis = smoothing_basis(data)?;
    let pts: Vec<f64> = data.times.iter().flat_map(|o| o.points.iter().copied()).collect();
    let vals: Vec<f64> = data.times.iter().flat_map(|o| o.values.iter().copied()).collect();
    let coef = basis.fit(&pts, &DMatrix::from_column_slice(vals.len(), 1, &vals), 1e-8)?;
    Ok(basis.eval(data.grid.points())? * coef.column(0))
}

impl Forecaster for MeanForecast {
    fn id(&self) -> String {
        "mean".into()
    }

    fn fit(&self, history: &ObservationSet) -> Result<Box<dyn Fitted>> {
        if history.len() < 2 {
            return Err(Error::InsufficientData("mean forecast needs two curves".into()));
        }
        Ok(Box::new(MeanFit {
            mean: pooled_mean(history)?,
        }))
    }
}

impl Fitted for MeanFit {
    fn predict(&self, h: usize) -> Result<DVector<f64>> {
        check_h(h)?;
        Ok(self.mean.clone())
    }

    fn predict_centered(&self, _recent: &[DVector<f64>], h: usize) -> Result<DVector<f64>> {
        check_h(h)?;
        Ok(DVector::zeros(self.mean.len()))
    }

    fn forecast_from(&self, _history: &ObservationSet, h: usize) -> Result<DVector<f64>> {
        self.predict(h)
    }

    fn input_dim(&self) -> usize {
        self.mean.len()
    }
}

/// VAR(1) on the data: at the observation points for fixed designs (then
/// splined to the grid), otherwise on curves interpolated onto the grid.
#[derive(Debug, Clone, Copy)]
pub struct VarY;

struct VarYFit {
    var: Var1,
    last: DVector<f64>,
    design: Design,
}

impl VarYFit {
    fn to_grid(&self, x: DVector<f64>) -> DVector<f64> {
        design_to_grid(&self.design, x)
    }
}

/// Fixed observation points (as grid indices) with the spline map back to
/// the grid, or `None` when curves are completed on the whole grid.
type Design = Option<(Vec<usize>, SplineMap)>;

fn design_of(history: &ObservationSet) -> Result<Design> {
    match fixed_design(history) {
        Some(idx) if idx.len() < history.grid.len() => {
            let pts: Vec<f64> = idx.iter().map(|&i| history.grid.points()[i]).collect();
            let spline = SplineMap::new(&pts, history.grid.points())?;
            Ok(Some((idx, spline)))
        }
        _ => Ok(None),
    }
}

/// Series in the coordinates used by VAR-Y and SES. Times observed off the
/// fixed points are read from their completed curves.
fn design_series(history: &ObservationSet, design: &Design) -> Result<Vec<DVector<f64>>> {
    let curves = complete_curves(history)?;
    Ok(match design {
        None => curves,
        Some((idx, _)) => history
            .times
            .iter()
            .zip(curves)
            .map(|(o, c)| {
                if &o.incidence.index == idx {
                    o.values.clone()
                } else {
                    DVector::from_iterator(idx.len(), idx.iter().map(|&i| c[i]))
                }
            })
            .collect(),
    })
}

fn design_to_grid(design: &Design, x: DVector<f64>) -> DVector<f64> {
    match design {
        Some((_, s)) => s.apply(&x),
        None => x,
    }
}

impl Forecaster for VarY {
    fn id(&self) -> String {
        "var-y".into()
    }

    fn fit(&self, history: &ObservationSet) -> Result<Box<dyn Fitted>> {
        let design = design_of(history)?;
        let series = design_series(history, &design)?;
        let var = Var1::fit(&series, true, false)?;
        Ok(Box::new(VarYFit {
            var,
            last: series[series.len() - 1].clone(),
            design,
        }))
    }
}

impl Fitted for VarYFit {
    fn predict(&self, h: usize) -> Result<DVector<f64>> {
        check_h(h)?;
        Ok(self.to_grid(self.var.step(&self.last, h)))
    }

    fn notes(&self) -> Vec<String> {
        if self.var.ridged {
            vec![format!("ridge fallback {VAR_RIDGE}")]
        } else {
            Vec::new()
        }
    }

    fn predict_centered(&self, recent: &[DVector<f64>], h: usize) -> Result<DVector<f64>> {
        check_h(h)?;
        Ok(self.to_grid(self.var.step_centered(last(recent)?, h)))
    }

    fn forecast_from(&self, history: &ObservationSet, h: usize) -> Result<DVector<f64>> {
        check_h(h)?;
        let series = design_series(history, &self.design)?;
        Ok(self.to_grid(self.var.step(last(&series)?, h)))
    }

    fn input_dim(&self) -> usize {
        self.last.len()
    }
}

/// Pointwise simple exponential smoothing.
#[derive(Debug, Clone, Copy)]
pub struct Ses;

/// Level recursion `l_t = a y_t + (1 - a) l_{t-1}` started at `y_0`; returns
/// the final level and the in-sample one-step squared error.
pub fn ses_run(y: &[f64], alpha: f64) -> (f64, f64) {
    let mut level = y[0];
    let mut sse = 0.0;
    for &v in &y[1..] {
        sse += (v - level).powi(2);
        level = alpha * v + (1.0 - alpha) * level;
    }
    (level, sse)
}

/// Smoothing weight on `{0.01, ..., 0.99}` minimizing in-sample SSE; 1 for
/// series too short or without variation.
pub fn ses_alpha(y: &[f64]) -> f64 {
    if y.len() < 3 {
        return 1.0;
    }
    let spread = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - y.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(spread > 0.0) {
        return 1.0;
    }
    let mut best = (f64::INFINITY, 1.0);
    for k in 1..=99 {
        let a = k as f64 / 100.0;
        let (_, sse) = ses_run(y, a);
        if sse < best.0 {
            best = (sse, a);
        }
    }
    best.1
}

struct SesFit {
    alpha: Vec<f64>,
    level: DVector<f64>,
    design: Design,
}

impl SesFit {
    fn levels(&self, series: &[DVector<f64>]) -> DVector<f64> {
        DVector::from_fn(self.alpha.len(), |i, _| {
            let y: Vec<f64> = series.iter().map(|v| v[i]).collect();
            ses_run(&y, self.alpha[i]).0
        })
    }
}

impl Forecaster for Ses {
    fn id(&self) -> String {
        "ses".into()
    }

    fn fit(&self, history: &ObservationSet) -> Result<Box<dyn Fitted>> {
        let design = design_of(history)?;
        let series = design_series(history, &design)?;
        let k = series[0].len();
        let mut alpha = Vec::with_capacity(k);
        let mut level = DVector::zeros(k);
        for i in 0..k {
            let y: Vec<f64> = series.iter().map(|v| v[i]).collect();
            let a = ses_alpha(&y);
            level[i] = ses_run(&y, a).0;
            alpha.push(a);
        }
        Ok(Box::new(SesFit { alpha, level, design }))
    }
}

impl Fitted for SesFit {
    fn predict(&self, h: usize) -> Result<DVector<f64>> {
        check_h(h)?;
        Ok(design_to_grid(&self.design, self.level.clone()))
    }

    fn predict_centered(&self, recent: &[DVector<f64>], h: usize) -> Result<DVector<f64>> {
        check_h(h)?;
        if recent.is_empty() {
            return Err(Error::InsufficientData("empty history".into()));
        }
        Ok(design_to_grid(&self.design, self.levels(recent)))
    }

    fn forecast_from(&self, history: &ObservationSet, h: usize) -> Result<DVector<f64>> {
        check_h(h)?;
        let series = design_series(history, &self.design)?;
        Ok(design_to_grid(&self.design, self.levels(&series)))
    }

    fn input_dim(&self) -> usize {
        self.level.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::EvaluationGrid;

    fn constant_set(c: f64, tn: usize) -> ObservationSet {
        let g = EvaluationGrid::uniform(10).unwrap();
        let pts = g.points().to_vec();
        ObservationSet::new(g, (0..tn).map(|_| (pts.clone(), vec![c; 10])).collect()).unwrap()
    }

    #[test]
    fn interpolation_edges() {
        let v = interpolate(&[0.2, 0.6], &[1.0, 3.0], &[0.0, 0.4, 0.6, 1.0]).unwrap();
        for (a, b) in v.iter().zip([1.0, 2.0, 3.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(interpolate(&[], &[], &[0.0]).is_none());
    }

    #[test]
    fn constant_data_forecasts_constant() {
        let data = constant_set(2.5, 12);
        for f in [
            Box::new(RandomWalk) as Box<dyn Forecaster>,
            Box::new(MeanForecast),
            Box::new(VarY),
            Box::new(Ses),
        ] {
            let fit = f.fit(&data).unwrap();
            let p = fit.predict(1).unwrap();
            assert!(p.iter().all(|v| (v - 2.5).abs() < 1e-6), "{} {p}", f.id());
        }
    }

    #[test]
    fn scalar_var_is_ols_ar1() {
        let y: Vec<f64> = (0..50).map(|t| ((t * 7 % 11) as f64).sin()).collect();
        let series: Vec<DVector<f64>> = y.iter().map(|&v| DVector::from_element(1, v)).collect();
        let var = Var1::fit(&series, true, false).unwrap();
        let (a, c) = scalar_ar(&y[..49], &y[1..], true);
        assert!((var.a[(0, 0)] - a).abs() < 1e-10);
        assert!((var.c[0] - c).abs() < 1e-10);
    }

    #[test]
    fn short_var_uses_ridge() {
        let series: Vec<DVector<f64>> = (0..4).map(|t| DVector::from_fn(5, |i, _| (t * 5 + i) as f64)).collect();
        let var = Var1::fit(&series, true, false).unwrap();
        assert!(var.ridged);
        assert!(var.a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn ses_limits() {
        let y = [1.0, 3.0, 2.0, 5.0];
        assert_eq!(ses_run(&y, 1.0).0, 5.0);
        assert_eq!(ses_alpha(&[2.0, 2.0, 2.0, 2.0]), 1.0);
        assert_eq!(ses_alpha(&[1.0, 2.0]), 1.0);
    }

    #[test]
    fn spline_map_interpolates_cubics_at_points() {
        let g = EvaluationGrid::uniform(30).unwrap();
        let idx = crate::simlab::spread_indices(30, 8);
        let pts: Vec<f64> = idx.iter().map(|&i| g.points()[i]).collect();
        let s = SplineMap::new(&pts, g.points()).unwrap();
        let v = DVector::from_iterator(8, pts.iter().map(|x| 1.0 + x - 2.0 * x * x));
        let out = s.apply(&v);
        for (k, &i) in idx.iter().enumerate() {
            assert!((out[i] - v[k]).abs() < 1e-8);
        }
    }
}
