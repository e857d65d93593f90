use nalgebra::{DMatrix, DVector};

use super::{check_h, last, smoothing_basis, Fitted, Forecaster, Var1};
use crate::error::{Error, Result};
use crate::grid::ObservationSet;

/// Ridge on the curvature penalty when presmoothing single curves.
pub const PRESMOOTH_RIDGE: f64 = 1e-6;
/// Share of variance the retained components must explain.
pub const FPC_LEVEL: f64 = 0.95;

/// Each curve least-squares smoothed with the 8-knot basis and evaluated on
/// the grid; empty times repeat the previous smoothed curve.
pub fn presmooth(data: &ObservationSet) -> Result<Vec<DVector<f64>>> {
    let basis = smoothing_basis(data)?;
    let g = basis.eval(data.grid.points())?;
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(data.len());
    let mut pending = 0;
    for o in &data.times {
        if o.is_empty() {
            match out.last() {
                Some(prev) => out.push(prev.clone()),
                None => pending += 1,
            }
            continue;
        }
        let vals = DMatrix::from_column_slice(o.len(), 1, o.values.as_slice());
        let coef = basis.fit(&o.points, &vals, PRESMOOTH_RIDGE)?;
        let curve = &g * coef.column(0);
        for _ in 0..pending {
            out.push(curve.clone());
        }
        pending = 0;
        out.push(curve);
    }
    if pending > 0 {
        return Err(Error::InsufficientData("no observations".into()));
    }
    Ok(out)
}

/// Functional principal components of presmoothed curves under the grid's
/// quadrature inner product.
#[derive(Debug, Clone)]
pub struct FpcDecomposition {
    pub mean: DVector<f64>,
    /// Retained eigenfunctions on the grid, one per column.
    pub eigenfunctions: DMatrix<f64>,
    /// All numerically positive eigenvalues, nonincreasing.
    pub eigenvalues: Vec<f64>,
    /// Scores of each curve on the retained components.
    pub scores: Vec<DVector<f64>>,
    /// Centered curves.
    pub centered: Vec<DVector<f64>>,
    pub weights: DVector<f64>,
}

impl FpcDecomposition {
    pub fn from_curves(curves: &[DVector<f64>], weights: &[f64], level: f64) -> Result<Self> {
        let n = curves.len();
        if n < 2 {
            return Err(Error::InsufficientData("FPCA needs two curves".into()));
        }
        let m = weights.len();
        let mean = curves.iter().fold(DVector::zeros(m), |acc, c| acc + c) / n as f64;
        let centered: Vec<DVector<f64>> = curves.iter().map(|c| c - &mean).collect();
        let sw = DVector::from_iterator(m, weights.iter().map(|w| w.sqrt()));
        let mut cov = DMatrix::<f64>::zeros(m, m);
        for x in &centered {
            let y = x.component_mul(&sw);
            cov.ger(1.0 / n as f64, &y, &y, 1.0);
        }
        let eig = cov.symmetric_eigen();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let top = eig.eigenvalues[order[0]].max(0.0);
        let positive: Vec<usize> = order
            .into_iter()
            .filter(|&k| eig.eigenvalues[k] > 1e-12 * top && top > 0.0)
            .collect();
        let eigenvalues: Vec<f64> = positive.iter().map(|&k| eig.eigenvalues[k]).collect();
        let total: f64 = eigenvalues.iter().sum();
        let mut kept = 0;
        let mut acc = 0.0;
        while kept < eigenvalues.len() && acc < level * total {
            acc += eigenvalues[kept];
            kept += 1;
        }
        let mut eigenfunctions = DMatrix::zeros(m, kept);
        for (j, &k) in positive.iter().take(kept).enumerate() {
            let mut v = eig.eigenvectors.column(k).component_div(&sw);
            // sign: largest-magnitude entry positive
            let imax = v.iamax();
            if v[imax] < 0.0 {
                v.neg_mut();
            }
            eigenfunctions.set_column(j, &v);
        }
        let w = DVector::from_column_slice(weights);
        let scores = centered
            .iter()
            .map(|x| eigenfunctions.transpose() * x.component_mul(&w))
            .collect();
        Ok(Self {
            mean,
            eigenfunctions,
            eigenvalues,
            scores,
            centered,
            weights: w,
        })
    }

    pub fn fit(data: &ObservationSet) -> Result<Self> {
        Self::from_curves(&presmooth(data)?, data.grid.weights(), FPC_LEVEL)
    }

    pub fn n_components(&self) -> usize {
        self.eigenfunctions.ncols()
    }

    pub fn project(&self, centered: &DVector<f64>) -> DVector<f64> {
        self.eigenfunctions.transpose() * centered.component_mul(&self.weights)
    }

    pub fn reconstruct(&self, scores: &DVector<f64>) -> DVector<f64> {
        &self.mean + &self.eigenfunctions * scores
    }

    /// Score-space lag-1 map `c_jk / lambda_k` with
    /// `c_jk = <C1 v_k, v_j>` from the empirical lag-1 covariance.
    pub fn kernel_score_map(&self) -> DMatrix<f64> {
        let k = self.n_components();
        let n = self.scores.len();
        let mut c1 = DMatrix::zeros(k, k);
        for t in 1..n {
            c1.ger(1.0 / (n - 1) as f64, &self.scores[t], &self.scores[t - 1], 1.0);
        }
        for j in 0..k {
            c1.column_mut(j).scale_mut(1.0 / self.eigenvalues[j]);
        }
        c1
    }
}

/// Horváth-Kokoszka estimated-kernel FAR(1); one-step forecasts only.
#[derive(Debug, Clone, Copy)]
pub struct EstimatedKernelFar;

pub struct EstimatedKernelFit {
    pub fpc: FpcDecomposition,
    /// `psi(tau_i, u_k)` on the grid.
    pub psi: DMatrix<f64>,
    /// `psi` with quadrature weights folded into its columns.
    operator: DMatrix<f64>,
}

impl EstimatedKernelFit {
    pub fn from_fpc(fpc: FpcDecomposition) -> Self {
        let v = &fpc.eigenfunctions;
        let psi = v * fpc.kernel_score_map() * v.transpose();
        let mut operator = psi.clone();
        for (k, mut col) in operator.column_iter_mut().enumerate() {
            col.scale_mut(fpc.weights[k]);
        }
        Self { fpc, psi, operator }
    }
}

impl Forecaster for EstimatedKernelFar {
    fn id(&self) -> String {
        "far-classic".into()
    }

    fn fit(&self, history: &ObservationSet) -> Result<Box<dyn Fitted>> {
        Ok(Box::new(EstimatedKernelFit::from_fpc(FpcDecomposition::fit(history)?)))
    }
}

impl Fitted for EstimatedKernelFit {
    fn predict(&self, h: usize) -> Result<DVector<f64>> {
        let x = self.fpc.centered.last().expect("nonempty by construction").clone();
        Ok(&self.fpc.mean + self.predict_centered(&[x], h)?)
    }

    fn kernel(&self) -> Option<DMatrix<f64>> {
        Some(self.psi.clone())
    }

    fn notes(&self) -> Vec<String> {
        vec![format!("components {}", self.fpc.n_components())]
    }

    fn predict_centered(&self, recent: &[DVector<f64>], h: usize) -> Result<DVector<f64>> {
        check_h(h)?;
        if h > 1 {
            return Err(Error::InvalidParameter("estimated-kernel FAR forecasts one step only".into()));
        }
        Ok(&self.operator * last(recent)?)
    }

    fn forecast_from(&self, history: &ObservationSet, h: usize) -> Result<DVector<f64>> {
        let x = presmooth(history)?.pop().expect("nonempty") - &self.fpc.mean;
        Ok(&self.fpc.mean + self.predict_centered(&[x], h)?)
    }

    fn input_dim(&self) -> usize {
        self.fpc.mean.len()
    }
}

/// VAR(1) on FPC scores.
#[derive(Debug, Clone, Copy)]
pub struct VarFpc;

pub struct VarFpcFit {
    pub fpc: FpcDecomposition,
    pub var: Var1,
}

impl VarFpcFit {
    pub fn new(fpc: FpcDecomposition) -> Result<Self> {
        let k = fpc.n_components();
        let var = if k == 0 {
            Var1 {
                a: DMatrix::zeros(0, 0),
                c: DVector::zeros(0),
                ridged: false,
            }
        } else {
            Var1::fit(&fpc.scores, false, false)?
        };
        Ok(Self { fpc, var })
    }

    /// Replace the score coefficient, e.g. by the estimated-kernel map.
    pub fn with_coefficient(fpc: FpcDecomposition, a: DMatrix<f64>) -> Self {
        let k = a.nrows();
        Self {
            fpc,
            var: Var1 {
                a,
                c: DVector::zeros(k),
                ridged: false,
            },
        }
    }
}

impl Forecaster for VarFpc {
    fn id(&self) -> String {
        "var-fpc".into()
    }

    fn fit(&self, history: &ObservationSet) -> Result<Box<dyn Fitted>> {
        Ok(Box::new(VarFpcFit::new(FpcDecomposition::fit(history)?)?))
    }
}

impl Fitted for VarFpcFit {
    fn predict(&self, h: usize) -> Result<DVector<f64>> {
        check_h(h)?;
        let s = self.fpc.scores.last().expect("nonempty by construction");
        Ok(self.fpc.reconstruct(&self.var.step(s, h)))
    }

    fn notes(&self) -> Vec<String> {
        let mut n = vec![format!("components {}", self.fpc.n_components())];
        if self.var.ridged {
            n.push(format!("ridge fallback {}", super::VAR_RIDGE));
        }
        n
    }

    fn predict_centered(&self, recent: &[DVector<f64>], h: usize) -> Result<DVector<f64>> {
        check_h(h)?;
        let s = self.fpc.project(last(recent)?);
        Ok(&self.fpc.eigenfunctions * self.var.step_centered(&s, h))
    }

    fn forecast_from(&self, history: &ObservationSet, h: usize) -> Result<DVector<f64>> {
        check_h(h)?;
        let x = presmooth(history)?.pop().expect("nonempty") - &self.fpc.mean;
        Ok(self.fpc.reconstruct(&self.var.step(&self.fpc.project(&x), h)))
    }

    fn input_dim(&self) -> usize {
        self.fpc.mean.len()
    }
}
