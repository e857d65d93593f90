//! Acceptance report. Every criterion prints one PASS or FAIL line; a FAIL
//! does not abort the run, only a crash does.

mod common;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use common::{brute_loglik, dense_dataset, joint_oracle, randn, random_fdlm, random_instance, random_lag, random_spd, random_states};
use gpfar::bench::{effective_sample_size, median_by_method, run_study, ResultRow, StudyInput, StudyMethod, StudyProtocol};
use gpfar::far::blocks::{obs_precision_params, sample_obs_variance};
use gpfar::far::init::initialize;
use gpfar::far::kernels::{lag_log_odds, lag_prior_log_odds, theta_conditional};
use gpfar::far::{run_gibbs, FarConfig, FarModel, KernelSetup, KernelStats, LagKernel, LagPrior};
use gpfar::fdlm::{factor_conditional, krige, nugget_params, sample_nugget, sample_ordered_precisions};
use gpfar::grid::EvaluationGrid;
use gpfar::io::{ingest_yields, write_rows_csv, CurveKind, IngestOptions};
use gpfar::rivals::RivalKind;
use gpfar::simlab::{quad_error_study, simulate_scenario, DesignKind, KernelFamily, KernelSpec, ScenarioSpec};
use gpfar::special::{ks_pvalue, ks_statistic, median};
use gpfar::ssm::{kalman_filter, kalman_smoother, SimulationSmoother};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Gamma};

/// Seconds per 1,000 iterations reported for the reference implementation at T = 350.
const REFERENCE_SECS_PER_1000: f64 = 138.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// `GPFAR_ACCEPTANCE=1,3,7` restricts the run to the listed criteria.
fn selected(id: &str) -> bool {
    std::env::var("GPFAR_ACCEPTANCE").map_or(true, |v| v.split(',').any(|x| x.trim() == id))
}

fn report(id: &str, name: &str, f: impl FnOnce() -> Outcome) -> Option<bool> {
    if !selected(id) {
        return None;
    }
    let t0 = Instant::now();
    let o = f();
    let secs = t0.elapsed().as_secs_f64();
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "[acceptance] {id:<11} {verdict} {name}: {} ({secs:.1} s)", o.detail).unwrap();
    out.flush().unwrap();
    Some(o.pass)
}

fn woodbury() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let m = rng.random_range(2..=50);
        let j = rng.random_range(1..=5usize.min(m));
        let f = random_fdlm(&mut rng, m, j);
        let k = f.covariance().unwrap();
        let p = f.precision().unwrap();
        worst = worst.max((&k * &p - DMatrix::identity(m, m)).amax());
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(worst < 1e-8 && secs < 1.0, format!("max |K K^-1 - I| = {worst:.2e}, {secs:.3} s"))
}

fn smoother() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let shapes = [(3, 1, 20), (4, 2, 15), (5, 1, 12), (6, 2, 10), (2, 3, 30)];
    let mut worst = 0.0f64;
    let mut outside = 0;
    let mut checked = 0;
    let n_draws = 10_000;
    for case in 0..20 {
        let (m, p, tn) = shapes[case % shapes.len()];
        let (spec, obs) = random_instance(&mut rng, m, p, tn);
        let oracle = joint_oracle(&spec, &obs);
        let f = kalman_filter(&spec, &obs).unwrap();
        let s = kalman_smoother(&f, &spec).unwrap();
        for t in 0..tn {
            worst = worst.max((&s.mean[t] - &oracle.mean[t]).amax());
            worst = worst.max((&s.cov[t] - &oracle.cov[t]).amax());
        }
        let eng = SimulationSmoother::new(&spec, &obs.index).unwrap();
        let mut sum = vec![DVector::<f64>::zeros(m); tn];
        for _ in 0..n_draws {
            let d = eng.draw(&obs.values, &mut rng).unwrap();
            for t in 0..tn {
                sum[t] += &d[t];
            }
        }
        for t in 0..tn {
            for i in 0..m {
                let se = (oracle.cov[t][(i, i)] / n_draws as f64).sqrt();
                checked += 1;
                if (sum[t][i] / n_draws as f64 - oracle.mean[t][i]).abs() > 4.0 * se {
                    outside += 1;
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst < 1e-8 && outside == 0 && secs < 60.0,
        format!("max moment error {worst:.2e}; {outside}/{checked} simulation means beyond 4 SE"),
    )
}

fn kriging() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let p = 1 + case % 2;
        let m = 8;
        let f = random_fdlm(&mut rng, m, 3);
        let j = f.n_factors();
        let phi_star = DVector::from_fn(j, |_, _| randn(&mut rng));
        let blocks: Vec<DMatrix<f64>> = (0..p).map(|_| DMatrix::from_fn(m, m, |_, _| 0.2 * randn(&mut rng))).collect();
        let rows: Vec<DVector<f64>> = (0..p).map(|_| DVector::from_fn(m, |_, _| 0.2 * randn(&mut rng))).collect();
        let w: Vec<f64> = (0..m).map(|_| 0.1 + rng.random::<f64>()).collect();
        let lags: Vec<DVector<f64>> = (0..p).map(|_| DVector::from_fn(m, |_, _| randn(&mut rng))).collect();
        let mu_t = DVector::from_fn(m, |_, _| randn(&mut rng));
        let (mean, var) = krige(&f, &phi_star, &rows, &blocks, &w, &mu_t, &lags).unwrap();

        let mut full_phi = DMatrix::zeros(m + 1, j);
        full_phi.rows_mut(0, m).copy_from(&f.phi);
        full_phi.row_mut(m).copy_from(&phi_star.transpose());
        let mut kf = &full_phi * DMatrix::from_diagonal(&f.sigma2) * full_phi.transpose();
        for i in 0..=m {
            kf[(i, i)] += f.sigma_eta2;
        }
        let mut pred_grid = DVector::zeros(m);
        let mut pred_star = 0.0;
        for l in 0..p {
            let qmu = DVector::from_fn(m, |i, _| w[i] * lags[l][i]);
            pred_grid += &blocks[l] * &qmu;
            pred_star += rows[l].dot(&qmu);
        }
        let kgg = kf.view((0, 0), (m, m)).into_owned();
        let ksg = kf.view((m, 0), (1, m)).into_owned();
        let chol = kgg.cholesky().unwrap();
        let dm = pred_star + (&ksg * chol.solve(&(&mu_t - pred_grid)))[(0, 0)];
        let dv = kf[(m, m)] - (&ksg * chol.solve(&ksg.transpose()))[(0, 0)];
        worst = worst.max((mean - dm).abs() / dm.abs().max(1.0));
        worst = worst.max((var - dv).abs() / dv.abs().max(1.0));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(worst < 1e-10 && secs < 10.0, format!("max relative error {worst:.2e}"))
}

fn gamma_ks(draws: &[f64], shape: f64, rate: f64) -> f64 {
    let g = Gamma::new(shape, rate).unwrap();
    ks_pvalue(ks_statistic(draws, |x| g.cdf(x)), draws.len())
}

fn gibbs_audits() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let n = 10_000;
    let mut notes = Vec::new();
    let mut ok = true;

    // measurement precision
    let data = dense_dataset(&mut rng, 8, 12, 0.2);
    let model = FarModel::new(&data, &FarConfig::default()).unwrap();
    let mut state = initialize(&model).unwrap();
    let mean = &model.bphi * &state.theta_mu;
    let mut ss = 0.0;
    let mut count = 0.0;
    for t in 0..model.n_fit {
        for (&i, &y) in model.obs.index[t].iter().zip(model.obs.values[t].iter()) {
            ss += (y - mean[i] - state.states[t][i]).powi(2);
            count += 1.0;
        }
    }
    let (shape, rate) = (1e-3 + count / 2.0, 1e-3 + ss / 2.0);
    let (cs, cr) = obs_precision_params(&model, &state);
    let param_err = ((cs - shape).abs() / shape).max((cr - rate).abs() / rate);
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            sample_obs_variance(&model, &mut state, &mut rng).unwrap();
            1.0 / state.sigma_nu2
        })
        .collect();
    let p = gamma_ks(&draws, shape, rate);
    ok &= param_err < 1e-8 && p > 0.01;
    notes.push(format!("obs precision KS p {p:.3}"));

    // nugget precision
    let f = random_fdlm(&mut rng, 9, 3);
    let eps = DMatrix::from_fn(9, 15, |_, _| randn(&mut rng));
    let e = DMatrix::from_fn(3, 15, |_, _| randn(&mut rng));
    let resid = &eps - &f.phi * &e;
    let (shape, rate) = (1e-3 + 9.0 * 15.0 / 2.0, 1e-3 + resid.norm_squared() / 2.0);
    let (cs, cr) = nugget_params(&eps, &f.phi, &e);
    let param_err = ((cs - shape).abs() / shape).max((cr - rate).abs() / rate);
    let draws: Vec<f64> = (0..n).map(|_| sample_nugget(&eps, &f.phi, &e, &mut rng).unwrap()).collect();
    let p = gamma_ks(&draws, shape, rate);
    ok &= param_err < 1e-8 && p > 0.01;
    notes.push(format!("nugget KS p {p:.3}"));

    // factors
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let f = random_fdlm(&mut rng, 9, 3);
        let eps = DMatrix::from_fn(9, 4, |_, _| randn(&mut rng));
        let (var, mean) = factor_conditional(&f, &eps);
        let s = DMatrix::from_diagonal(&f.sigma2);
        let kinv = f.covariance().unwrap().try_inverse().unwrap();
        let cross = &s * f.phi.transpose();
        worst = worst.max((mean - &cross * &kinv * &eps).amax());
        worst = worst.max((DMatrix::from_diagonal(&var) - (&s - &cross * &kinv * cross.transpose())).amax());
    }
    ok &= worst < 1e-8;
    notes.push(format!("factor moments {worst:.1e}"));

    // ordered precisions: the last is Gamma, each other is Gamma truncated above by its successor
    let tn = 20;
    let e = DMatrix::from_fn(3, tn, |_, _| randn(&mut rng));
    let ss: Vec<f64> = (0..3).map(|k| e.row(k).norm_squared()).collect();
    let mut last = Vec::with_capacity(n);
    let mut pit = vec![Vec::with_capacity(n); 2];
    for _ in 0..n {
        let d = sample_ordered_precisions(&e, &mut rng).unwrap();
        last.push(d[2]);
        for k in 0..2 {
            let g = Gamma::new((tn as f64 - 1.0) / 2.0, ss[k] / 2.0).unwrap();
            pit[k].push(g.cdf(d[k]) / g.cdf(d[k + 1]));
        }
    }
    let p_last = gamma_ks(&last, 1e-3 + tn as f64 / 2.0, 1e-3 + ss[2] / 2.0);
    let p_pit: Vec<f64> = pit.iter().map(|u| ks_pvalue(ks_statistic(u, |x| x.clamp(0.0, 1.0)), n)).collect();
    ok &= p_last > 0.01 && p_pit.iter().all(|&p| p > 0.01);
    notes.push(format!("ordered precisions KS p {p_last:.3}, {:.3}, {:.3}", p_pit[0], p_pit[1]));

    // kernel coefficients
    let grid = EvaluationGrid::uniform(6).unwrap();
    let setup = KernelSetup::new(&grid, 0).unwrap();
    let (j, d) = (setup.marginal_dim(), setup.dim());
    let mu = random_states(&mut rng, 6, 30);
    let kinv = random_spd(&mut rng, 6, 0.5);
    let lags: Vec<LagKernel> = [true, false].iter().map(|&s| random_lag(&mut rng, d, 0.3, s)).collect();
    let stats = KernelStats::new(&setup, &mu, 2, &kinv);
    let (prec, lin) = theta_conditional(&setup, &stats, &lags);
    let mut dense_prec = DMatrix::zeros(2 * d, 2 * d);
    let mut dense_lin = DVector::zeros(2 * d);
    for t in 2..mu.len() {
        let mut x = DMatrix::zeros(6, 2 * d);
        for (l, lag) in lags.iter().enumerate() {
            let c = &setup.bq * &mu[t - l - 1];
            let w = lag.s() * lag.xi;
            for a in 0..j {
                for b in 0..j {
                    for i in 0..6 {
                        x[(i, l * d + a + j * b)] = w * setup.b[(i, a)] * c[b];
                    }
                }
            }
        }
        dense_prec += x.transpose() * &kinv * &x;
        dense_lin += x.transpose() * &kinv * &mu[t];
    }
    for (l, lag) in lags.iter().enumerate() {
        let pen = (&setup.omega2 + &setup.omega0 * lag.kappa) * lag.lambda_tilde;
        let mut blk = dense_prec.view_mut((l * d, l * d), (d, d));
        blk += pen;
    }
    let mean = prec.clone().cholesky().unwrap().solve(&lin);
    let dense_mean = dense_prec.clone().cholesky().unwrap().solve(&dense_lin);
    let theta_err = ((&prec - &dense_prec).amax() / dense_prec.amax())
        .max((&mean - &dense_mean).amax() / dense_mean.amax().max(1.0));
    ok &= theta_err < 1e-8;
    notes.push(format!("kernel block {theta_err:.1e}"));

    // lag inclusion odds
    let grid = EvaluationGrid::uniform(2).unwrap();
    let setup = KernelSetup::new(&grid, 0).unwrap();
    let d = setup.dim();
    let prior = LagPrior::default();
    let mut worst = 0.0f64;
    for case in 0..20 {
        let p = 1 + case % 3;
        let mu = random_states(&mut rng, 2, 4.max(p + 1));
        let kinv = random_spd(&mut rng, 2, 0.3);
        let stats = KernelStats::new(&setup, &mu, p, &kinv);
        let mut lags: Vec<LagKernel> = (0..p)
            .map(|_| {
                let on = rng.random();
                random_lag(&mut rng, d, 0.4, on)
            })
            .collect();
        for l in 0..p {
            let keep = lags[l].included;
            lags[l].included = true;
            let on = brute_loglik(&setup, &grid, &lags, &mu, &kinv);
            lags[l].included = false;
            let off = brute_loglik(&setup, &grid, &lags, &mu, &kinv);
            lags[l].included = keep;
            let inc: Vec<bool> = lags.iter().map(|x| x.included).collect();
            let expected = on - off + lag_prior_log_odds(&prior, &inc, l);
            let got = lag_log_odds(&setup, &stats, &lags, &prior, l);
            worst = worst.max((got - expected).abs() / (1.0 + expected.abs()));
        }
    }
    ok &= worst < 1e-8;
    notes.push(format!("lag odds {worst:.1e}"));

    let secs = t0.elapsed().as_secs_f64();
    outcome(ok && secs < 300.0, notes.join("; "))
}

fn far_config(burn: usize, iters: usize) -> FarConfig {
    FarConfig {
        burn,
        iters,
        ..FarConfig::default()
    }
}

fn bimodal_scenario(t: usize, n_forecast: usize) -> ScenarioSpec {
    ScenarioSpec {
        t_fit: t,
        n_forecast,
        kernels: vec![KernelSpec::new(KernelFamily::BimodalGaussian, 0.8)],
        matern_nu: 2.5,
        design: DesignKind::SparseRandom,
        ..ScenarioSpec::default()
    }
}

fn simulation_ordering() -> Outcome {
    let spec = bimodal_scenario(350, 25);
    let far = StudyMethod::Far(far_config(2500, 2500));
    let rivals: Vec<StudyMethod> = [RivalKind::FarClassic, RivalKind::VarFpc, RivalKind::VarY, RivalKind::Ses, RivalKind::Mean, RivalKind::Rw]
        .into_iter()
        .map(StudyMethod::Rival)
        .chain([StudyMethod::Oracle])
        .collect();
    let mut rows: Vec<ResultRow> = Vec::new();
    let mut far_secs = 0.0;
    for r in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + r);
        let sc = simulate_scenario(&spec, &mut rng).unwrap();
        let input = StudyInput {
            truth: Some(&sc.truth),
            oracle: Some(&sc.oracle),
            psi_truth: sc.psi.first(),
            ..StudyInput::new(&sc.data)
        };
        let protocol = StudyProtocol {
            n_fit: 350,
            n_eval: 25,
            seed: r,
            ..StudyProtocol::default()
        };
        let t0 = Instant::now();
        let a = run_study(&input, std::slice::from_ref(&far), &protocol).unwrap();
        far_secs += t0.elapsed().as_secs_f64();
        let b = run_study(&input, &rivals, &protocol).unwrap();
        rows.extend(a.rows.into_iter().chain(b.rows).map(|row| ResultRow { window_start: r as usize, ..row }));
    }
    let msfe = median_by_method(&rows, "msfe", 1);
    let psi = median_by_method(&rows, "mse_psi", 0);
    let get = |v: &[(String, f64)], k: &str| v.iter().find(|(m, _)| m == k).map(|x| x.1).unwrap_or(f64::NAN);
    let ours = get(&msfe, "fdlm-far(1)");
    let beaten: Vec<&str> = ["far-classic", "var-fpc", "var-y", "ses", "mean"]
        .into_iter()
        .filter(|m| ours < get(&msfe, m))
        .collect();
    let psi_ok = get(&psi, "fdlm-far(1)") < get(&psi, "far-classic");
    let per_1000 = far_secs / 10.0 / 5.0;
    let speed_ok = per_1000 <= 10.0 * REFERENCE_SECS_PER_1000;
    let table = msfe.iter().map(|(m, v)| format!("{m} {v:.3e}")).collect::<Vec<_>>().join(", ");
    outcome(
        beaten.len() == 5 && psi_ok && speed_ok,
        format!(
            "median MSFE {table}; beats {}/5; MSE_psi fdlm {:.3e} vs classic {:.3e}; {per_1000:.1} s per 1000 iterations",
            beaten.len(),
            get(&psi, "fdlm-far(1)"),
            get(&psi, "far-classic")
        ),
    )
}

fn lag_selection() -> Outcome {
    let spec = ScenarioSpec {
        t_fit: 125,
        n_forecast: 0,
        kernels: vec![
            KernelSpec::new(KernelFamily::BimodalGaussian, 0.4),
            KernelSpec::new(KernelFamily::LinearTau, 0.2),
        ],
        matern_nu: 2.5,
        design: DesignKind::SparseFixed,
        ..ScenarioSpec::default()
    };
    let cfg = FarConfig {
        p_max: 4,
        select_lags: true,
        ..far_config(1000, 1000)
    };
    let modes: Vec<usize> = (0..10)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(600 + r);
            let sc = simulate_scenario(&spec, &mut rng).unwrap();
            run_gibbs(&sc.data, &cfg, &mut rng).unwrap().p_star_mode()
        })
        .collect();
    let hits = modes.iter().filter(|m| **m == 2 || **m == 3).count();
    outcome(hits >= 8, format!("p* modes {modes:?}; {hits}/10 in {{2, 3}}"))
}

fn quadrature() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let kernel = KernelSpec::new(KernelFamily::BimodalGaussian, 0.8);
    let m_list = [5, 10, 15, 20, 25, 30, 50, 100];
    let rows = quad_error_study(&kernel, 2.5, 0.01, 0.1, &m_list, 100, &mut rng).unwrap();
    let monotone = rows.windows(2).all(|w| w[1].s <= w[0].s);
    let s = |m: usize| rows.iter().find(|r| r.m == m).unwrap().s;
    let ratio = s(20) / s(100);
    let secs = t0.elapsed().as_secs_f64();
    let table = rows.iter().map(|r| format!("{} {:.2e}", r.m, r.s)).collect::<Vec<_>>().join(", ");
    outcome(
        monotone && ratio <= 2.0 && secs < 60.0,
        format!("median S_M {table}; nonincreasing {monotone}; S_20/S_100 = {ratio:.1}"),
    )
}

fn business_days(from: NaiveDate, to: NaiveDate) -> Vec<NaiveDate> {
    let mut out = Vec::new();
    let mut d = from;
    while d < to {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

/// Nelson-Siegel factors following a stationary VAR, plus noise, in percent.
fn synthetic_yields(path: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let dates = business_days(NaiveDate::from_ymd_opt(2003, 1, 2).unwrap(), NaiveDate::from_ymd_opt(2017, 1, 1).unwrap());
    let mats = CurveKind::Nominal.maturities();
    let lambda = 0.0609;
    let mut beta = [4.5, -2.0, 1.0];
    let target = [4.5, -2.0, 1.0];
    let mut w = csv::Writer::from_path(path).unwrap();
    let header: Vec<String> = std::iter::once("date".to_owned())
        .chain(mats.iter().map(|m| if *m < 12.0 { format!("{m}M") } else { format!("{}Y", m / 12.0) }))
        .collect();
    w.write_record(&header).unwrap();
    for (k, d) in dates.iter().enumerate() {
        for i in 0..3 {
            beta[i] = target[i] + 0.995 * (beta[i] - target[i]) + 0.05 * randn(&mut rng);
        }
        let mut rec = vec![d.format("%Y-%m-%d").to_string()];
        for &m in mats {
            let x = lambda * m;
            let slope = (1.0 - (-x).exp()) / x;
            let y = beta[0] + beta[1] * slope + beta[2] * (slope - (-x).exp()) + 0.01 * randn(&mut rng);
            // an occasional missing cell
            rec.push(if (k + m as usize) % 97 == 0 { String::new() } else { format!("{y:.2}") });
        }
        w.write_record(&rec).unwrap();
    }
    w.flush().unwrap();
}

fn yield_rows(path: &Path, methods: &[StudyMethod]) -> (Vec<ResultRow>, Vec<String>) {
    let ds = ingest_yields(path, &IngestOptions::new(CurveKind::Nominal)).unwrap();
    let data = ds.to_observations().unwrap();
    let windows = ds.windows(NaiveDate::from_ymd_opt(2003, 2, 1).unwrap(), 9, 18, &[1]);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for w in windows {
        let input = StudyInput {
            maturities: Some(&ds.maturities),
            ..StudyInput::new(&data)
        };
        let out = run_study(&input, methods, &w.protocol).unwrap();
        rows.extend(out.rows);
        labels.push(w.label);
    }
    (rows, labels)
}

fn yield_study() -> Outcome {
    let real = std::env::var_os("GPFAR_NOMINAL_YIELDS").map(std::path::PathBuf::from).filter(|p| p.is_file());
    let rmsfe_of = |rows: &[ResultRow], method: &str| -> Vec<(usize, f64)> {
        rows.iter()
            .filter(|r| r.method == method && r.metric == "rmsfe" && r.horizon == 1)
            .map(|r| (r.window_start, r.value))
            .collect()
    };
    match real {
        Some(path) => {
            let methods = [StudyMethod::Rival(RivalKind::Rw), StudyMethod::Far(FarConfig::default())];
            let (rows, labels) = yield_rows(&path, &methods);
            let rw = rmsfe_of(&rows, "rw");
            let far = rmsfe_of(&rows, "fdlm-far(1)");
            let first = labels.first().cloned().unwrap_or_default();
            let rw_first = rw.first().map(|x| x.1).unwrap_or(f64::NAN);
            let cell_ok = first == "2/03" && (rw_first / 0.0488 - 1.0).abs() <= 0.02;
            let close = rw.len() == far.len()
                && rw.iter().zip(&far).all(|(a, b)| a.0 == b.0 && (b.1 / a.1 - 1.0).abs() <= 0.15);
            outcome(
                cell_ok && close,
                format!("FRB data: RW {first} h=1 RMSFE {rw_first:.4} (target 0.0488); FAR(1) within 15% of RW in every window: {close}"),
            )
        }
        None => {
            let dir = tempfile::tempdir().unwrap();
            let csv = dir.path().join("nominal.csv");
            synthetic_yields(&csv);
            let methods = [
                StudyMethod::Rival(RivalKind::Rw),
                StudyMethod::Rival(RivalKind::Dl),
                StudyMethod::Rival(RivalKind::VarY),
                StudyMethod::Far(far_config(200, 200)),
            ];
            let (a, labels) = yield_rows(&csv, &methods);
            let (b, _) = yield_rows(&csv, &methods);
            let out_a = dir.path().join("a.csv");
            let out_b = dir.path().join("b.csv");
            write_rows_csv(&out_a, &a).unwrap();
            write_rows_csv(&out_b, &b).unwrap();
            let same = std::fs::read(&out_a).unwrap() == std::fs::read(&out_b).unwrap();
            let complete = labels.len() == 9 && ["rw", "dl", "var-y", "fdlm-far(1)"].iter().all(|m| rmsfe_of(&a, m).len() == 9);
            outcome(
                same && complete,
                format!("synthetic yields (no FRB file): {} windows {labels:?}; identical reruns: {same}", labels.len()),
            )
        }
    }
}

fn diagnostics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let sc = simulate_scenario(&bimodal_scenario(350, 25), &mut rng).unwrap();
    let cfg = FarConfig {
        n_fit: Some(350),
        predictive_draws: true,
        ..far_config(5000, 5000)
    };
    let draws = run_gibbs(&sc.data, &cfg, &mut rng).unwrap();
    let per_point = |series: &[DVector<f64>]| -> (f64, f64) {
        let ess: Vec<f64> = (0..series[0].len())
            .map(|i| effective_sample_size(&series.iter().map(|v| v[i]).collect::<Vec<_>>()))
            .collect();
        (ess.iter().cloned().fold(f64::INFINITY, f64::min), median(&ess))
    };
    let (lo, med) = per_point(&draws.predictive[0]);
    let (mean_lo, mean_med) = per_point(&draws.trace);
    outcome(
        lo > 1000.0,
        format!(
            "one-step predictive draws, ESS over {} draws: min {lo:.0}, median {med:.0} across grid points \
             (conditional forecast mean: min {mean_lo:.0}, median {mean_med:.0})",
            draws.predictive[0].len()
        ),
    )
}

fn stationarity_prior() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let grid = EvaluationGrid::uniform(30).unwrap();
    let setup = KernelSetup::new(&grid, gpfar::basis::BsplineBasis::default_interior(30)).unwrap();
    let omega = setup.penalty(1.0);
    let chol = omega.cholesky().unwrap();
    let d = setup.dim();
    let lambda_prior = rand_distr::Gamma::new(0.5, 2.0).unwrap();
    let mut full = Vec::with_capacity(1000);
    let mut unscaled = Vec::with_capacity(1000);
    for _ in 0..1000 {
        let lambda: f64 = rng.sample(lambda_prior);
        let z = DVector::from_fn(d, |_, _| randn(&mut rng));
        let tilde = chol.l().transpose().solve_upper_triangular(&z).unwrap() / lambda.sqrt();
        let xi = gpfar::far::kernels::XI_PRIOR_VAR.sqrt() * randn(&mut rng);
        let q = tilde.dot(&(&setup.omega0 * &tilde));
        unscaled.push(q);
        full.push(xi * xi * q);
    }
    let m = median(&full);
    outcome(
        m < 1.0,
        format!(
            "prior-only median of theta' Omega0 theta at kappa = 1: {m:.3e} (with xi = 1: {:.2})",
            median(&unscaled)
        ),
    )
}

#[test]
fn acceptance_report() {
    let results = [
        report("1", "Woodbury precision", woodbury),
        report("2", "smoother and simulation smoother vs joint Gaussian", smoother),
        report("3", "kriging vs dense conditioning", kriging),
        report("4", "Gibbs conditional audits", gibbs_audits),
        report("5", "simulation-study ordering and speed", simulation_ordering),
        report("6", "lag selection", lag_selection),
        report("7", "quadrature study", quadrature),
        report("8", "yield study", yield_study),
        report("9", "forecast-chain ESS", diagnostics),
        report("stationary", "prior shrinkage toward stationarity", stationarity_prior),
    ];
    let run: Vec<bool> = results.into_iter().flatten().collect();
    let passed = run.iter().filter(|p| **p).count();
    writeln!(std::io::stdout().lock(), "[acceptance] {passed}/{} passed", run.len()).unwrap();
}
