//! Evaluation grids, trapezoid quadrature weights, and observation designs.
//!
//! Observation points always live on the evaluation grid; the incidence
//! matrix `Z_t` is stored as the list of grid indices it selects.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance when matching an observation point to a grid point.
pub const POINT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationGrid {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl EvaluationGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        let weights = trapezoid_vec(&points)?;
        Ok(Self { points, weights })
    }

    /// `m` equally spaced points on `[0, 1]`.
    pub fn uniform(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 points, got {m}")));
        }
        Self::new(linspace(0.0, 1.0, m))
    }

    /// Sorted union of several point sets, merging points closer than [`POINT_TOL`].
    pub fn union(sets: &[&[f64]]) -> Result<Self> {
        let mut all: Vec<f64> = sets.iter().flat_map(|s| s.iter().copied()).collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut pts: Vec<f64> = Vec::with_capacity(all.len());
        for x in all {
            if pts.last().map_or(true, |&l| (x - l).abs() > POINT_TOL) {
                pts.push(x);
            }
        }
        Self::new(pts)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Diagonal quadrature matrix `Q`.
    pub fn q_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(&self.weights))
    }

    pub fn min_spacing(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }

    /// Index of the grid point equal to `x` within [`POINT_TOL`].
    pub fn index_of(&self, x: f64) -> Result<usize> {
        let i = self.points.partition_point(|&p| p < x - POINT_TOL);
        if i < self.points.len() && (self.points[i] - x).abs() <= POINT_TOL {
            Ok(i)
        } else {
            Err(Error::PointNotOnGrid(x))
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.index_of(x).is_ok()
    }
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n)
        .map(|i| {
            if i == n - 1 {
                b
            } else {
                a + (b - a) * i as f64 / (n - 1) as f64
            }
        })
        .collect()
}

fn trapezoid_vec(points: &[f64]) -> Result<Vec<f64>> {
    let m = points.len();
    if m < 2 {
        return Err(Error::InvalidGrid(format!("need at least 2 points, got {m}")));
    }
    if points.iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidGrid("non-finite point".into()));
    }
    if points.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid("points must be strictly increasing".into()));
    }
    let mut w = vec![0.0; m];
    w[0] = 0.5 * (points[1] - points[0]);
    w[m - 1] = 0.5 * (points[m - 1] - points[m - 2]);
    for i in 1..m - 1 {
        w[i] = 0.5 * (points[i + 1] - points[i - 1]);
    }
    Ok(w)
}

/// Trapezoid quadrature weights as the diagonal matrix `Q`.
pub fn trapezoid_weights(points: &[f64]) -> Result<DMatrix<f64>> {
    let w = trapezoid_vec(points)?;
    Ok(DMatrix::from_diagonal(&DVector::from_vec(w)))
}

/// Incidence matrix `Z_t`, stored as the grid indices of each observation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Incidence {
    pub index: Vec<usize>,
    pub grid_len: usize,
}

impl Incidence {
    pub fn rows(&self) -> usize {
        self.index.len()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.index.len(), self.grid_len);
        for (r, &c) in self.index.iter().enumerate() {
            z[(r, c)] = 1.0;
        }
        z
    }

    /// `Z_t x`.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.index.len(), self.index.iter().map(|&i| x[i]))
    }
}

pub fn incidence(obs_points: &[f64], grid: &EvaluationGrid) -> Result<Incidence> {
    let index = obs_points
        .iter()
        .map(|&x| grid.index_of(x))
        .collect::<Result<Vec<_>>>()?;
    Ok(Incidence {
        index,
        grid_len: grid.len(),
    })
}

/// `Psi Q mu_prev`: trapezoid approximation of `int psi(tau, u) mu(u) du` on the grid.
pub fn quad_apply(psi: &DMatrix<f64>, q: &DMatrix<f64>, mu_prev: &DVector<f64>) -> Result<DVector<f64>> {
    let m = mu_prev.len();
    if psi.ncols() != m || q.nrows() != m || q.ncols() != m {
        return Err(Error::Dimension(format!(
            "quad_apply: psi {}x{}, Q {}x{}, mu {}",
            psi.nrows(),
            psi.ncols(),
            q.nrows(),
            q.ncols(),
            m
        )));
    }
    Ok(psi * (q * mu_prev))
}

/// Observations at a single time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeObs {
    pub points: Vec<f64>,
    pub values: DVector<f64>,
    pub incidence: Incidence,
}

impl TimeObs {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Functional time series observed at per-time subsets of an evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub grid: EvaluationGrid,
    pub times: Vec<TimeObs>,
}

impl ObservationSet {
    /// Build from per-time `(points, values)` pairs; every point must lie on `grid`.
    pub fn new(grid: EvaluationGrid, data: Vec<(Vec<f64>, Vec<f64>)>) -> Result<Self> {
        let mut times = Vec::with_capacity(data.len());
        for (t, (pts, vals)) in data.into_iter().enumerate() {
            if pts.len() != vals.len() {
                return Err(Error::Dimension(format!(
                    "time {t}: {} points but {} values",
                    pts.len(),
                    vals.len()
                )));
            }
            let inc = incidence(&pts, &grid)?;
            times.push(TimeObs {
                points: pts,
                values: DVector::from_vec(vals),
                incidence: inc,
            });
        }
        Ok(Self { grid, times })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_obs(&self) -> usize {
        self.times.iter().map(|o| o.len()).sum()
    }

    /// Observations restricted to times `0..t`.
    pub fn truncated(&self, t: usize) -> Self {
        Self {
            grid: self.grid.clone(),
            times: self.times[..t.min(self.times.len())].to_vec(),
        }
    }

    /// Distinct observation points across all times (the set `T_o`), sorted.
    pub fn observed_points(&self) -> Vec<f64> {
        let mut seen = vec![false; self.grid.len()];
        for o in &self.times {
            for &i in &o.incidence.index {
                seen[i] = true;
            }
        }
        seen.iter()
            .enumerate()
            .filter(|(_, &s)| s)
            .map(|(i, _)| self.grid.points()[i])
            .collect()
    }

    /// The same data re-indexed onto a finer grid containing all current points.
    pub fn regrid(&self, grid: EvaluationGrid) -> Result<Self> {
        let data = self
            .times
            .iter()
            .map(|o| (o.points.clone(), o.values.iter().copied().collect()))
            .collect();
        Self::new(grid, data)
    }
}
