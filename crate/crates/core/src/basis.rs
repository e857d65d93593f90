//! Spline bases: cubic B-splines and their tensor product for the FAR kernels,
//! and the low-rank thin plate basis used for loading curves and the mean.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::quantile_sorted;

const DEGREE: usize = 3;

/// Gauss-Legendre nodes and weights on [-1, 1], 5 points.
const GL_X: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL_W: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];

/// Cubic B-spline basis with clamped boundary knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BsplineBasis {
    knots: Vec<f64>,
    lo: f64,
    hi: f64,
}

impl BsplineBasis {
    /// `n_interior` equally spaced interior knots on `[lo, hi]`.
    pub fn uniform(n_interior: usize, lo: f64, hi: f64) -> Result<Self> {
        let interior: Vec<f64> = (1..=n_interior)
            .map(|k| lo + (hi - lo) * k as f64 / (n_interior + 1) as f64)
            .collect();
        Self::with_interior(&interior, lo, hi)
    }

    pub fn with_interior(interior: &[f64], lo: f64, hi: f64) -> Result<Self> {
        if !(hi > lo) {
            return Err(Error::InvalidParameter(format!("empty knot span [{lo}, {hi}]")));
        }
        if interior.windows(2).any(|w| w[1] <= w[0]) || interior.iter().any(|&k| k <= lo || k >= hi) {
            return Err(Error::InvalidParameter("interior knots must be increasing and inside the span".into()));
        }
        let mut knots = vec![lo; DEGREE + 1];
        knots.extend_from_slice(interior);
        knots.extend(std::iter::repeat(hi).take(DEGREE + 1));
        Ok(Self { knots, lo, hi })
    }

    /// Interior knot count `floor(min(n_obs_points / 2, 35))`.
    pub fn default_interior(n_obs_points: usize) -> usize {
        (n_obs_points / 2).min(35)
    }

    pub fn dim(&self) -> usize {
        self.knots.len() - DEGREE - 1
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    fn span(&self, x: f64) -> Result<usize> {
        let tol = 1e-12 * (self.hi - self.lo);
        if x < self.lo - tol || x > self.hi + tol {
            return Err(Error::OutOfDomain(x, self.lo, self.hi));
        }
        let n = self.dim();
        if x >= self.hi {
            return Ok(n - 1);
        }
        let x = x.max(self.lo);
        // last i in [DEGREE, n-1] with knots[i] <= x
        let mut i = DEGREE;
        while i + 1 < n && self.knots[i + 1] <= x {
            i += 1;
        }
        Ok(i)
    }

    /// Nonzero basis values and derivatives up to `nder` at `x`.
    /// Returns `(span, ders)` with `ders[k][j]` the k-th derivative of basis `span - 3 + j`.
    fn ders(&self, x: f64, nder: usize) -> Result<(usize, Vec<[f64; DEGREE + 1]>)> {
        let p = DEGREE;
        let i = self.span(x)?;
        let x = x.clamp(self.lo, self.hi);
        let u = &self.knots;
        let mut ndu = [[0.0f64; DEGREE + 1]; DEGREE + 1];
        let mut left = [0.0f64; DEGREE + 1];
        let mut right = [0.0f64; DEGREE + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = x - u[i + 1 - j];
            right[j] = u[i + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        let mut ders = vec![[0.0f64; DEGREE + 1]; nder + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        let mut a = [[0.0f64; DEGREE + 1]; 2];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for k in 1..=nder.min(p) {
                let mut d = 0.0;
                let rk = r as isize - k as isize;
                let pk = p - k;
                if r >= k {
                    let rk = rk as usize;
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk];
                    d = a[s2][0] * ndu[rk][pk];
                }
                let j1: usize = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2: usize = if r as isize - 1 <= pk as isize { k - 1 } else { p - r };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                    d += a[s2][j] * ndu[idx][pk];
                }
                if r <= pk {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    d += a[s2][k] * ndu[r][pk];
                }
                ders[k][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut fac = p as f64;
        for k in 1..=nder.min(p) {
            for j in 0..=p {
                ders[k][j] *= fac;
            }
            fac *= (p - k) as f64;
        }
        Ok((i, ders))
    }

    /// Row of `r`-th derivatives of all basis functions at `x`.
    pub fn eval_deriv_row(&self, x: f64, r: usize) -> Result<Vec<f64>> {
        let mut row = vec![0.0; self.dim()];
        if r > DEGREE {
            self.span(x)?;
            return Ok(row);
        }
        let (i, d) = self.ders(x, r)?;
        for j in 0..=DEGREE {
            row[i - DEGREE + j] = d[r][j];
        }
        Ok(row)
    }

    pub fn eval_row(&self, x: f64) -> Result<Vec<f64>> {
        self.eval_deriv_row(x, 0)
    }

    /// Design matrix `len(points) x J`.
    pub fn eval(&self, points: &[f64]) -> Result<DMatrix<f64>> {
        self.eval_deriv(points, 0)
    }

    pub fn eval_deriv(&self, points: &[f64], r: usize) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(points.len(), self.dim());
        for (k, &x) in points.iter().enumerate() {
            let row = self.eval_deriv_row(x, r)?;
            for (j, v) in row.into_iter().enumerate() {
                out[(k, j)] = v;
            }
        }
        Ok(out)
    }

    /// Exact Gram matrix `int B_i^{(r)} B_j^{(r)}` over the knot span.
    pub fn gram(&self, r: usize) -> DMatrix<f64> {
        let n = self.dim();
        let mut g = DMatrix::zeros(n, n);
        for s in DEGREE..n {
            let (a, b) = (self.knots[s], self.knots[s + 1]);
            if b <= a {
                continue;
            }
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for q in 0..GL_X.len() {
                let x = mid + half * GL_X[q];
                let w = half * GL_W[q];
                let (i, d) = self.ders(x, r).expect("node inside span");
                for j in 0..=DEGREE {
                    for k in 0..=DEGREE {
                        g[(i - DEGREE + j, i - DEGREE + k)] += w * d[r][j] * d[r][k];
                    }
                }
            }
        }
        g
    }

    /// Greville abscissae: coefficients reproducing the identity function.
    pub fn greville(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| (self.knots[i + 1] + self.knots[i + 2] + self.knots[i + 3]) / 3.0)
            .collect()
    }

    /// Coefficients of the linear function `a + b x`.
    pub fn linear_coeffs(&self, a: f64, b: f64) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.greville().into_iter().map(|g| a + b * g))
    }

    /// Least-squares coefficients of curves sampled at `points`, one column per curve.
    pub fn fit(&self, points: &[f64], values: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
        let b = self.eval(points)?;
        let mut lhs = b.transpose() * &b;
        if ridge > 0.0 {
            lhs += self.gram(2) * ridge;
        }
        let rhs = b.transpose() * values;
        let chol = crate::linalg::cholesky_jitter(&lhs)?;
        Ok(chol.solve(&rhs))
    }
}

/// Tensor-product cubic B-spline basis for bivariate kernels `psi(tau, u)`.
///
/// Coefficients are `theta = vec(Theta)` with `psi(tau, u) = b(tau)' Theta b(u)`;
/// index `a + J b` multiplies `b_a(tau) b_b(u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorKernelBasis {
    pub marginal: BsplineBasis,
}

impl TensorKernelBasis {
    pub fn new(marginal: BsplineBasis) -> Self {
        Self { marginal }
    }

    pub fn marginal_dim(&self) -> usize {
        self.marginal.dim()
    }

    pub fn dim(&self) -> usize {
        let j = self.marginal.dim();
        j * j
    }

    pub fn theta_matrix(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let j = self.marginal.dim();
        DMatrix::from_column_slice(j, j, theta.as_slice())
    }

    pub fn theta_vec(theta: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_column_slice(theta.as_slice())
    }

    /// `b(u)' kron b(tau)'`.
    pub fn design_row(&self, tau: f64, u: f64) -> Result<DVector<f64>> {
        let bt = DVector::from_vec(self.marginal.eval_row(tau)?);
        let bu = DVector::from_vec(self.marginal.eval_row(u)?);
        Ok(bu.kronecker(&bt))
    }

    /// Kernel values `B_tau Theta B_u'` on a product of point sets.
    pub fn surface(&self, theta: &DVector<f64>, taus: &[f64], us: &[f64]) -> Result<DMatrix<f64>> {
        let bt = self.marginal.eval(taus)?;
        let bu = self.marginal.eval(us)?;
        Ok(bt * self.theta_matrix(theta) * bu.transpose())
    }

    /// Same as [`surface`](Self::surface) with a precomputed marginal design.
    pub fn surface_with(&self, theta: &DVector<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        b * self.theta_matrix(theta) * b.transpose()
    }

    /// Coefficients of the bilinear surface `a + b tau + c u + d tau u`.
    pub fn bilinear_coeffs(&self, a: f64, b: f64, c: f64, d: f64) -> DVector<f64> {
        let j = self.marginal.dim();
        let g = self.marginal.greville();
        let theta = DMatrix::from_fn(j, j, |r, s| a + b * g[r] + c * g[s] + d * g[r] * g[s]);
        Self::theta_vec(&theta)
    }

    /// Gram matrix `Omega_0`, so that `theta' Omega_0 theta = int int psi^2`.
    pub fn stationarity_gram(&self) -> DMatrix<f64> {
        let g = self.marginal.gram(0);
        g.kronecker(&g)
    }

    /// Roughness penalty `Omega_2` for `int int (psi_tautau^2 + psi_uu^2)`.
    pub fn roughness_penalty(&self) -> DMatrix<f64> {
        let g0 = self.marginal.gram(0);
        let g2 = self.marginal.gram(2);
        g0.kronecker(&g2) + g2.kronecker(&g0)
    }

    pub fn penalties(&self) -> PenaltyPair {
        PenaltyPair {
            omega2: self.roughness_penalty(),
            omega0: self.stationarity_gram(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyPair {
    pub omega2: DMatrix<f64>,
    pub omega0: DMatrix<f64>,
}

impl PenaltyPair {
    pub fn combined(&self, kappa: f64) -> DMatrix<f64> {
        &self.omega2 + &self.omega0 * kappa
    }
}

/// Low-rank thin plate spline basis `[1, tau, Z_K Omega_K^{-1/2}]` with
/// knots at quantiles of the observation points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThinPlateBasis {
    knots: Vec<f64>,
    /// `Omega_K^{-1/2}` from the SVD of the knot radial matrix.
    transform: DMatrix<f64>,
}

/// Prior variance used for the unpenalized constant and linear terms.
pub const UNPENALIZED_VAR: f64 = 1e8;

impl ThinPlateBasis {
    /// Default knot count `min(15, ceil(n_unique / 4))`.
    pub fn default_knots(n_unique: usize) -> usize {
        15.min(n_unique.div_ceil(4))
    }

    pub fn new(obs_points: &[f64], n_knots: usize) -> Result<Self> {
        let mut u: Vec<f64> = obs_points.to_vec();
        u.sort_by(|a, b| a.partial_cmp(b).unwrap());
        u.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        if n_knots > 0 && u.len() < n_knots {
            return Err(Error::InsufficientData(format!(
                "{} distinct points for {} knots",
                u.len(),
                n_knots
            )));
        }
        let knots: Vec<f64> = (1..=n_knots)
            .map(|k| quantile_sorted(&u, k as f64 / (n_knots + 1) as f64))
            .collect();
        let transform = if n_knots == 0 {
            DMatrix::zeros(0, 0)
        } else {
            let omega = DMatrix::from_fn(n_knots, n_knots, |i, j| (knots[i] - knots[j]).abs().powi(3));
            let svd = omega.svd(true, true);
            let uu = svd.u.unwrap();
            let vt = svd.v_t.unwrap();
            let mut inv_sqrt_d = DMatrix::zeros(n_knots, n_knots);
            for i in 0..n_knots {
                let d = svd.singular_values[i];
                if d <= 1e-14 * svd.singular_values[0] {
                    return Err(Error::RankDeficient("thin plate knot matrix".into()));
                }
                inv_sqrt_d[(i, i)] = 1.0 / d.sqrt();
            }
            // sqrt(Omega) = U sqrt(D) V', so its inverse is V D^{-1/2} U'
            vt.transpose() * inv_sqrt_d * uu.transpose()
        };
        Ok(Self { knots, transform })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn dim(&self) -> usize {
        2 + self.knots.len()
    }

    pub fn design(&self, points: &[f64]) -> DMatrix<f64> {
        let k = self.knots.len();
        let mut out = DMatrix::zeros(points.len(), 2 + k);
        let zk = DMatrix::from_fn(points.len(), k, |i, j| (points[i] - self.knots[j]).abs().powi(3));
        let z = if k > 0 { zk * &self.transform } else { zk };
        for i in 0..points.len() {
            out[(i, 0)] = 1.0;
            out[(i, 1)] = points[i];
            for j in 0..k {
                out[(i, 2 + j)] = z[(i, j)];
            }
        }
        out
    }

    /// Diagonal prior precision `Lambda^{-1} = diag(1e-8, 1e-8, lambda, ...)`.
    pub fn prior_precision(&self, lambda: f64) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| if i < 2 { 1.0 / UNPENALIZED_VAR } else { lambda })
    }
}

/// Penalized least squares `argmin ||y - X b||^2 + b' diag(pen) b`.
/// Returns the coefficients and the effective degrees of freedom `tr(H)`.
pub fn penalized_fit(x: &DMatrix<f64>, y: &DVector<f64>, pen: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let mut lhs = x.transpose() * x;
    for i in 0..pen.len() {
        lhs[(i, i)] += pen[i];
    }
    let chol = crate::linalg::cholesky_jitter(&lhs)?;
    let coef = chol.solve(&(x.transpose() * y));
    let xtx = x.transpose() * x;
    let df = chol.solve(&xtx).trace();
    Ok((coef, df))
}
