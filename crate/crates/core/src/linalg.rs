//! Small dense linear-algebra helpers shared by the samplers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Replace `a` by `(a + a') / 2` in place.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Cholesky factorization with escalating diagonal jitter.
///
/// The first retry adds `1e-10` times the mean absolute diagonal; each further
/// retry multiplies the jitter by 100, up to a relative level of `1e-4`.
pub fn cholesky_jitter(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension(format!(
            "cholesky of non-square {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok(c);
    }
    let n = a.nrows();
    let scale = if n == 0 {
        1.0
    } else {
        (a.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64).max(1e-300)
    };
    let mut jitter = 1e-10 * scale;
    while jitter <= 1e-4 * scale {
        let mut b = a.clone();
        symmetrize(&mut b);
        for i in 0..n {
            b[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(b) {
            return Ok(c);
        }
        jitter *= 100.0;
    }
    Err(Error::NotPositiveDefinite(format!("{n}x{n} matrix")))
}

pub fn log_det_chol(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

pub fn std_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Draw from `N(P^{-1} b, P^{-1})` given the precision `P`. Returns `(mean, draw)`.
pub fn sample_from_precision<R: Rng + ?Sized>(
    rng: &mut R,
    precision: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let chol = cholesky_jitter(precision)?;
    let mean = chol.solve(b);
    let z = std_normal_vec(rng, b.len());
    let l = chol.l_dirty();
    let dev = l
        .tr_solve_lower_triangular(&z)
        .ok_or_else(|| Error::Numerical("triangular solve".into()))?;
    let draw = &mean + dev;
    Ok((mean, draw))
}

/// Draw from `N(0, L L')` given a lower Cholesky factor.
pub fn sample_with_factor<R: Rng + ?Sized>(rng: &mut R, l: &DMatrix<f64>) -> DVector<f64> {
    let z = std_normal_vec(rng, l.ncols());
    lower_mul(l, &z)
}

/// `L z` for lower-triangular `L`, skipping the zero upper half.
pub fn lower_mul(l: &DMatrix<f64>, z: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut out = DVector::zeros(n);
    for j in 0..l.ncols() {
        let zj = z[j];
        if zj == 0.0 {
            continue;
        }
        for i in j..n {
            out[i] += l[(i, j)] * zj;
        }
    }
    out
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Solve `A x = b` by least squares through the SVD; tolerant of rank deficiency.
pub fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = a.clone().svd(true, true);
    let tol = 1e-12 * svd.singular_values.max().max(1e-300);
    svd.solve(b, tol).map_err(|e| Error::Numerical(e.to_string()))
}

/// Matrix with the columns of `vs` as columns.
pub fn hstack(vs: &[DVector<f64>], nrows: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(nrows, vs.len());
    for (j, v) in vs.iter().enumerate() {
        m.set_column(j, v);
    }
    m
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}
