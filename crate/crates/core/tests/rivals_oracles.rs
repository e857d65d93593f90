use gpfar::grid::{EvaluationGrid, ObservationSet};
use gpfar::linalg::std_normal_vec;
use gpfar::rivals::fpc::{EstimatedKernelFit, VarFpcFit};
use gpfar::rivals::ns::{kalman, ns_loadings, DynamicNelsonSiegel, NelsonSiegelTwoStep, NsParams, DL_LAMBDA};
use gpfar::rivals::{
    ses_alpha, ses_run, EstimatedKernelFar, Forecaster, FpcDecomposition, MeanForecast, RandomWalk, Ses, VarFpc,
    VarY,
};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const NOMINAL: [f64; 11] = [1.0, 3.0, 6.0, 12.0, 24.0, 36.0, 60.0, 84.0, 120.0, 240.0, 360.0];

fn dense(grid: &EvaluationGrid, curves: &[DVector<f64>]) -> ObservationSet {
    let pts = grid.points().to_vec();
    ObservationSet::new(grid.clone(), curves.iter().map(|c| (pts.clone(), c.as_slice().to_vec())).collect()).unwrap()
}

/// Curves `x_t = sum_j xi_tj v_j` with VAR(1) scores.
fn score_process(
    grid: &EvaluationGrid,
    v: &DMatrix<f64>,
    b: &DMatrix<f64>,
    sd: &[f64],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<DVector<f64>> {
    let k = v.ncols();
    let mut xi = DVector::zeros(k);
    let mut out = Vec::with_capacity(n);
    for t in 0..n + 100 {
        let e = std_normal_vec(rng, k);
        xi = b * xi + DVector::from_fn(k, |i, _| sd[i] * e[i]);
        if t >= 100 {
            out.push(v * &xi);
        }
    }
    assert_eq!(out[0].len(), grid.len());
    out
}

/// Two functions orthonormal under the grid's quadrature weights.
fn orthonormal_pair(grid: &EvaluationGrid) -> DMatrix<f64> {
    let w = DVector::from_column_slice(grid.weights());
    let mut v = DMatrix::from_fn(grid.len(), 2, |i, j| {
        let x = grid.points()[i];
        if j == 0 {
            (std::f64::consts::PI * x).sin()
        } else {
            (2.0 * std::f64::consts::PI * x).sin()
        }
    });
    for j in 0..2 {
        for k in 0..j {
            let proj = v.column(j).component_mul(&w).dot(&v.column(k));
            let ck = v.column(k).clone_owned();
            v.column_mut(j).axpy(-proj, &ck, 1.0);
        }
        let norm = v.column(j).component_mul(&w).dot(&v.column(j)).sqrt();
        v.column_mut(j).scale_mut(1.0 / norm);
    }
    v
}

#[test]
fn mean_forecast_within_noise_envelope() {
    let g = EvaluationGrid::uniform(30).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (sigma, n) = (0.1, 200);
    let truth = DVector::from_iterator(30, g.points().iter().map(|x| (2.0 * std::f64::consts::PI * x).sin()));
    let curves: Vec<DVector<f64>> = (0..n).map(|_| &truth + std_normal_vec(&mut rng, 30) * sigma).collect();
    let fit = MeanForecast.fit(&dense(&g, &curves)).unwrap();
    let mu = fit.predict(1).unwrap();
    let band = 3.0 * sigma / (n as f64).sqrt();
    for i in 0..30 {
        assert!((mu[i] - truth[i]).abs() < band, "point {i}: {} vs {}", mu[i], truth[i]);
    }
}

#[test]
fn random_walk_copies_last_curve() {
    let g = EvaluationGrid::uniform(8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let curves: Vec<DVector<f64>> = (0..5).map(|_| std_normal_vec(&mut rng, 8)).collect();
    let fit = RandomWalk.fit(&dense(&g, &curves)).unwrap();
    assert_eq!(fit.predict(3).unwrap(), curves[4]);
}

#[test]
fn var_y_recovers_coefficient() {
    let g = EvaluationGrid::uniform(3).unwrap();
    let a = DMatrix::from_row_slice(3, 3, &[0.5, 0.2, 0.0, -0.1, 0.4, 0.1, 0.0, 0.3, 0.6]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 5000;
    let mut x = DVector::zeros(3);
    let curves: Vec<DVector<f64>> = (0..n)
        .map(|_| {
            x = &a * &x + std_normal_vec(&mut rng, 3);
            x.clone()
        })
        .collect();
    let data = dense(&g, &curves);
    let fit = VarY.fit(&data).unwrap();
    // a unit impulse at each coordinate reveals the columns of A
    for j in 0..3 {
        let mut e = DVector::zeros(3);
        e[j] = 1.0;
        let col = fit.predict_centered(&[e], 1).unwrap();
        let err = (col - a.column(j)).amax();
        assert!(err < 5.0 / (n as f64).sqrt(), "column {j}: {err}");
    }
}

#[test]
fn ses_beats_random_walk_on_persistent_ar() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut y = vec![0.0];
    for _ in 0..2000 {
        let e: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
        y.push(0.9 * y[y.len() - 1] + e);
    }
    let a = ses_alpha(&y);
    assert!(a > 0.0 && a < 1.0);
    let (_, sse) = ses_run(&y, a);
    let rw: f64 = y.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
    assert!(sse <= rw);
}

#[test]
fn estimated_kernel_near_zero_under_null() {
    let g = EvaluationGrid::uniform(20).unwrap();
    let v = orthonormal_pair(&g);
    let b = DMatrix::zeros(2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mse = |n: usize, rng: &mut ChaCha8Rng| {
        let curves = score_process(&g, &v, &b, &[1.0, 0.7], n, rng);
        let fit = EstimatedKernelFit::from_fpc(FpcDecomposition::from_curves(&curves, g.weights(), 0.95).unwrap());
        fit.psi.map(|x| x * x).mean()
    };
    let small: Vec<f64> = (0..5).map(|_| mse(200, &mut rng)).collect();
    let large = mse(2000, &mut rng);
    let small_mean = small.iter().sum::<f64>() / 5.0;
    assert!(large < small_mean, "{large} vs {small_mean}");
    assert!(large < 0.01);
}

#[test]
fn estimated_kernel_recovers_kernel_in_fpc_span() {
    let g = EvaluationGrid::uniform(30).unwrap();
    let v = orthonormal_pair(&g);
    let b = DMatrix::from_row_slice(2, 2, &[0.6, 0.2, -0.1, 0.4]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let curves = score_process(&g, &v, &b, &[1.0, 0.8], 2000, &mut rng);
    let fit = EstimatedKernelFar.fit(&dense(&g, &curves)).unwrap();
    let psi = &v * &b * v.transpose();
    let est = fit.kernel().unwrap();
    let mse = (&est - &psi).map(|x| x * x).mean();
    let norm = psi.map(|x| x * x).mean();
    assert!(mse < 0.05 * norm, "{mse} vs {norm}");
}

#[test]
fn one_component_var_fpc_is_scalar_ar() {
    let g = EvaluationGrid::uniform(15).unwrap();
    let v = orthonormal_pair(&g).columns(0, 1).clone_owned();
    let b = DMatrix::from_element(1, 1, 0.7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let curves = score_process(&g, &v, &b, &[1.0], 300, &mut rng);
    let fpc = FpcDecomposition::from_curves(&curves, g.weights(), 0.95).unwrap();
    assert_eq!(fpc.n_components(), 1);
    let s: Vec<f64> = fpc.scores.iter().map(|x| x[0]).collect();
    let num: f64 = s.windows(2).map(|w| w[0] * w[1]).sum();
    let den: f64 = s[..s.len() - 1].iter().map(|x| x * x).sum();
    let fit = VarFpcFit::new(fpc).unwrap();
    assert!((fit.var.a[(0, 0)] - num / den).abs() < 1e-10);
}

/// Every rival's frozen forecast map is linear in centered inputs.
fn check_linearity(alpha: f64, seed: u64) {
    let g = EvaluationGrid::new(NOMINAL.iter().map(|m| m / 360.0).collect()).unwrap();
    let v = orthonormal_pair(&g);
    let b = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.3]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let curves: Vec<DVector<f64>> = score_process(&g, &v, &b, &[1.0, 0.5], 40, &mut rng)
        .into_iter()
        .map(|c| c + std_normal_vec(&mut rng, 11) * 0.05)
        .collect();
    let data = dense(&g, &curves);
    let methods: Vec<Box<dyn Forecaster>> = vec![
        Box::new(RandomWalk),
        Box::new(MeanForecast),
        Box::new(VarY),
        Box::new(Ses),
        Box::new(EstimatedKernelFar),
        Box::new(VarFpc),
        Box::new(NelsonSiegelTwoStep::new(NOMINAL.to_vec(), false)),
    ];
    let mut dra = DynamicNelsonSiegel::new(NOMINAL.to_vec());
    dra.restarts = 0;
    dra.max_iters = 30;
    if let Ok(fit) = dra.fit(&data) {
        let recent: Vec<DVector<f64>> = curves[30..].to_vec();
        let scaled: Vec<DVector<f64>> = recent.iter().map(|c| c * alpha).collect();
        let base = fit.predict_centered(&recent, 1).unwrap();
        assert!((fit.predict_centered(&scaled, 1).unwrap() - base * alpha).amax() < 1e-8);
    }
    for m in &methods {
        let fit = m.fit(&data).unwrap();
        let recent: Vec<DVector<f64>> = curves[30..].to_vec();
        let scaled: Vec<DVector<f64>> = recent.iter().map(|c| c * alpha).collect();
        let base = fit.predict_centered(&recent, 1).unwrap();
        let out = fit.predict_centered(&scaled, 1).unwrap();
        let tol = 1e-9 * (1.0 + base.amax() * alpha.abs());
        assert!((out - base * alpha).amax() < tol, "{}", m.id());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn forecasts_linear_in_centered_inputs(alpha in -5.0f64..5.0, seed in 0u64..1000) {
        check_linearity(alpha, seed);
    }
}

fn simulate_ns(params: &NsParams, n: usize, rng: &mut ChaCha8Rng) -> ObservationSet {
    let g = EvaluationGrid::new(NOMINAL.iter().map(|m| m / 360.0).collect()).unwrap();
    let f = ns_loadings(&NOMINAL, params.lambda);
    let mut beta = params.mu;
    let mut curves = Vec::with_capacity(n);
    for t in 0..n + 50 {
        let e = std_normal_vec(rng, 3);
        beta = params.mu + params.a * (beta - params.mu) + Vector3::from_fn(|i, _| params.q[i].sqrt() * e[i]);
        if t >= 50 {
            let noise = std_normal_vec(rng, 11).component_mul(&params.h.map(f64::sqrt));
            curves.push(&f * DVector::from_column_slice(beta.as_slice()) + noise);
        }
    }
    dense(&g, &curves)
}

fn true_params() -> NsParams {
    NsParams {
        lambda: 0.09,
        a: Matrix3::from_diagonal(&Vector3::new(0.95, 0.9, 0.8)),
        mu: Vector3::new(5.0, -1.0, 0.5),
        h: DVector::from_element(11, 0.05f64.powi(2)),
        q: Vector3::new(0.1, 0.15, 0.2).map(|x: f64| x * x),
    }
}

#[test]
fn kalman_loglik_matches_joint_gaussian() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = true_params();
    let data = simulate_ns(&params, 5, &mut rng);
    // drop a few cells to exercise missing maturities
    let mut obs: Vec<(Vec<usize>, DVector<f64>)> =
        data.times.iter().map(|o| (o.incidence.index.clone(), o.values.clone())).collect();
    for (t, o) in obs.iter_mut().enumerate() {
        let keep: Vec<usize> = (0..11).filter(|i| (i + t) % 3 != 0).collect();
        o.1 = DVector::from_iterator(keep.len(), keep.iter().map(|&i| o.1[i]));
        o.0 = keep;
    }
    let run = kalman(&params, &NOMINAL, &obs, false).unwrap();

    // dense oracle: stack all observed values, build their joint covariance
    let f = ns_loadings(&NOMINAL, params.lambda);
    let mut p0 = Matrix3::from_diagonal(&params.q);
    for _ in 0..2000 {
        p0 = params.a * p0 * params.a.transpose() + Matrix3::from_diagonal(&params.q);
    }
    let cov_beta = |s: usize, t: usize| {
        let (lo, hi) = if s <= t { (s, t) } else { (t, s) };
        let c = params.a.pow((hi - lo) as u32) * p0;
        if s <= t {
            c.transpose()
        } else {
            c
        }
    };
    let rows: Vec<(usize, usize)> = obs.iter().enumerate().flat_map(|(t, o)| o.0.iter().map(move |&i| (t, i))).collect();
    let y = DVector::from_iterator(rows.len(), obs.iter().flat_map(|o| o.1.iter().copied()));
    let mean = DVector::from_iterator(
        rows.len(),
        rows.iter().map(|&(_, i)| (f.row(i) * DVector::from_column_slice(params.mu.as_slice()))[0]),
    );
    let cov = DMatrix::from_fn(rows.len(), rows.len(), |r, c| {
        let (s, i) = rows[r];
        let (t, j) = rows[c];
        let cb = cov_beta(s, t);
        let fi = Vector3::new(f[(i, 0)], f[(i, 1)], f[(i, 2)]);
        let fj = Vector3::new(f[(j, 0)], f[(j, 1)], f[(j, 2)]);
        let mut v = fi.dot(&(cb.transpose() * fj));
        if r == c {
            v += params.h[i];
        }
        v
    });
    let chol = cov.cholesky().unwrap();
    let d = y - mean;
    let brute = -0.5
        * (rows.len() as f64 * (2.0 * std::f64::consts::PI).ln()
            + 2.0 * chol.l().diagonal().map(|x| x.ln()).sum()
            + d.dot(&chol.solve(&d)));
    assert!((run.loglik - brute).abs() < 1e-8 * brute.abs().max(1.0), "{} vs {brute}", run.loglik);
}

#[test]
fn state_space_fit_recovers_decay_and_dominates_two_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let truth = true_params();
    let data = simulate_ns(&truth, 500, &mut rng);
    let mut dra = DynamicNelsonSiegel::new(NOMINAL.to_vec());
    dra.restarts = 1;
    let (est, ll) = dra.estimate(&data).unwrap();
    assert!((est.lambda - truth.lambda).abs() < 0.1 * truth.lambda, "lambda {}", est.lambda);
    let obs: Vec<(Vec<usize>, DVector<f64>)> =
        data.times.iter().map(|o| (o.incidence.index.clone(), o.values.clone())).collect();
    let two_step = dra.two_step_params(&data).unwrap();
    assert_eq!(two_step.lambda, DL_LAMBDA);
    let ll_dl = kalman(&two_step, &NOMINAL, &obs, false).unwrap().loglik;
    assert!(ll >= ll_dl, "{ll} < {ll_dl}");
    let fit = dra.fit(&data).unwrap();
    assert!(fit.predict(5).unwrap().iter().all(|x| x.is_finite()));
}

#[test]
fn frozen_forecast_on_training_data_matches_predict() {
    let g = EvaluationGrid::new(NOMINAL.iter().map(|m| m / 360.0).collect()).unwrap();
    let v = orthonormal_pair(&g);
    let b = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.3]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let curves: Vec<DVector<f64>> = score_process(&g, &v, &b, &[1.0, 0.5], 40, &mut rng)
        .into_iter()
        .map(|c| c.add_scalar(3.0) + std_normal_vec(&mut rng, 11) * 0.05)
        .collect();
    // sparse-fixed design on a subset of maturities
    let keep = [0usize, 2, 4, 6, 8, 10];
    let sparse = ObservationSet::new(
        g.clone(),
        curves
            .iter()
            .map(|c| (keep.iter().map(|&i| g.points()[i]).collect(), keep.iter().map(|&i| c[i]).collect()))
            .collect(),
    )
    .unwrap();
    let methods: Vec<Box<dyn Forecaster>> = vec![
        Box::new(RandomWalk),
        Box::new(MeanForecast),
        Box::new(VarY),
        Box::new(Ses),
        Box::new(EstimatedKernelFar),
        Box::new(VarFpc),
        Box::new(NelsonSiegelTwoStep::new(NOMINAL.to_vec(), true)),
    ];
    for data in [dense(&g, &curves), sparse] {
        for m in &methods {
            let fit = m.fit(&data).unwrap();
            let a = fit.predict(1).unwrap();
            let b = fit.forecast_from(&data, 1).unwrap();
            assert!((a - b).amax() < 1e-10, "{}", m.id());
        }
    }
}
