use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gpfar::bench::{
    credible_bands, effective_sample_size, ess_summary, median_by_method, run_study, CellFailure, ResultRow,
    StudyInput, StudyProtocol,
};
use gpfar::far::{run_gibbs, GibbsDraws};
use gpfar::grid::ObservationSet;
use gpfar::io::{self, DatasetFile, IngestOptions, MaturityDictionary};
use gpfar::simlab::{quad_error_study, simulate_scenario};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn metadata(cfg: &RunConfig, command: &str) -> serde_json::Value {
    let mut m = cfg.metadata();
    m["command"] = command.into();
    m
}

/// `<file>.meta.json` next to a CSV output.
fn write_sidecar(path: &Path, meta: &serde_json::Value) -> Result<PathBuf> {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    let side = PathBuf::from(name);
    io::write_json(&side, meta)?;
    Ok(side)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(cfg: &RunConfig) -> Result<DatasetFile> {
    let Some(path) = &cfg.data else {
        bail!("no dataset given; set `data` in the config or pass --data");
    };
    DatasetFile::read(path).with_context(|| format!("reading dataset {}", path.display()))
}

pub fn simulate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    prepare_out(&cfg.out)?;
    let mut rng = rng_for(cfg.seed, 0);
    let sc = simulate_scenario(&cfg.scenario, &mut rng)?;
    let mut file = DatasetFile::from_observations(&sc.data).with_simulation(&sc.truth, &sc.oracle, &sc.psi);
    file.metadata = metadata(cfg, "simulate");
    let path = cfg.out.join("dataset.json");
    file.write(&path)?;
    Ok(vec![path])
}

#[derive(Debug, Serialize)]
struct EssEntry {
    quantity: String,
    ess_min: f64,
    ess_median: f64,
}

/// Compact description of a finished chain.
#[derive(Debug, Serialize)]
struct FitSummary {
    kept: usize,
    n_fit: usize,
    n_factors: usize,
    p_star_mode: usize,
    inclusion_frequency: Vec<f64>,
    sigma_nu_mean: f64,
    mean_function: Vec<f64>,
    grid: Vec<f64>,
    /// Posterior mean kernels by lag, row-major on the grid.
    psi_mean: Vec<Vec<Vec<f64>>>,
    ess: Vec<EssEntry>,
    metadata: serde_json::Value,
}

fn scalar_ess(name: &str, chain: &[f64]) -> Option<EssEntry> {
    (!chain.is_empty()).then(|| {
        let e = effective_sample_size(chain);
        EssEntry {
            quantity: name.into(),
            ess_min: e,
            ess_median: e,
        }
    })
}

fn summarize(draws: &GibbsDraws, meta: serde_json::Value) -> FitSummary {
    let mut ess: Vec<EssEntry> = Vec::new();
    ess.extend(scalar_ess("sigma_nu2", &draws.sigma_nu2));
    ess.extend(scalar_ess("sigma_eta2", &draws.sigma_eta2));
    if !draws.trace.is_empty() {
        let (lo, med) = ess_summary(&draws.trace);
        ess.push(EssEntry {
            quantity: "forecast_trace".into(),
            ess_min: lo,
            ess_median: med,
        });
    }
    let n = draws.sigma_nu2.len().max(1) as f64;
    FitSummary {
        kept: draws.kept,
        n_fit: draws.n_fit,
        n_factors: draws.n_factors,
        p_star_mode: draws.p_star_mode(),
        inclusion_frequency: draws.inclusion_frequency(),
        sigma_nu_mean: draws.sigma_nu2.iter().map(|v| v.sqrt()).sum::<f64>() / n,
        mean_function: draws.mean_function.as_slice().to_vec(),
        grid: draws.grid.clone(),
        psi_mean: draws
            .psi_mean
            .iter()
            .map(|m| m.row_iter().map(|r| r.iter().copied().collect()).collect())
            .collect(),
        ess,
        metadata: meta,
    }
}

fn chain(cfg: &RunConfig, data: &ObservationSet, predictive: bool) -> Result<GibbsDraws> {
    let mut far = cfg.far.clone();
    far.predictive_draws |= predictive;
    let mut rng = rng_for(cfg.seed, 1);
    Ok(run_gibbs(data, &far, &mut rng)?)
}

pub fn fit(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let data = load_dataset(cfg)?.observations()?;
    prepare_out(&cfg.out)?;
    let draws = chain(cfg, &data, false)?;
    let meta = metadata(cfg, "fit");
    let csv = cfg.out.join("draws.csv");
    let schema = cfg.out.join("draws.schema.json");
    io::write_draws(&csv, &schema, &draws, meta.clone())?;
    let summary = cfg.out.join("summary.json");
    io::write_json(&summary, &summarize(&draws, meta))?;
    Ok(vec![csv, schema, summary])
}

#[derive(Debug, Serialize)]
struct BandRow {
    horizon: usize,
    tau: f64,
    mean: f64,
    pointwise_lower: f64,
    pointwise_upper: f64,
    simultaneous_lower: f64,
    simultaneous_upper: f64,
}

pub fn forecast(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let data = load_dataset(cfg)?.observations()?;
    prepare_out(&cfg.out)?;
    let draws = chain(cfg, &data, true)?;
    let meta = metadata(cfg, "forecast");
    let grid = draws.grid.clone();

    let mut labels = Vec::new();
    let mut curves = Vec::new();
    for s in &draws.forecasts {
        for (o, m) in s.origins.iter().zip(&s.mean) {
            labels.push(format!("h{}@{}", s.horizon, o));
            curves.push(m.clone());
        }
    }
    let fpath = cfg.out.join("forecast.csv");
    io::write_curves_csv(&fpath, &grid, &labels, &curves)?;

    let mut rows = Vec::new();
    for (h, pred) in cfg.far.horizons.iter().zip(&draws.predictive) {
        let b = credible_bands(pred, cfg.band_level).with_context(|| format!("bands at horizon {h}"))?;
        for (i, &tau) in grid.iter().enumerate() {
            rows.push(BandRow {
                horizon: *h,
                tau,
                mean: b.mean[i],
                pointwise_lower: b.pointwise_lower[i],
                pointwise_upper: b.pointwise_upper[i],
                simultaneous_lower: b.simultaneous_lower[i],
                simultaneous_upper: b.simultaneous_upper[i],
            });
        }
    }
    let bpath = cfg.out.join("bands.csv");
    write_csv(&bpath, &rows)?;
    let s1 = write_sidecar(&fpath, &meta)?;
    let s2 = write_sidecar(&bpath, &meta)?;
    Ok(vec![fpath, bpath, s1, s2])
}

/// Result of a study before it is written.
#[derive(Debug, Default)]
pub struct StudyTables {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<CellFailure>,
    /// `(window_start, label)` for each window or replicate.
    pub windows: Vec<(usize, String)>,
}

fn simulation_study(cfg: &RunConfig) -> Result<StudyTables> {
    let reps: Vec<Result<(gpfar::bench::StudyOutput, usize)>> = (0..cfg.study.replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_for(cfg.seed, 100 + r as u64);
            let sc = simulate_scenario(&cfg.scenario, &mut rng)?;
            let protocol = StudyProtocol {
                start: 0,
                n_fit: cfg.scenario.t_fit,
                n_eval: cfg.scenario.n_forecast,
                seed: cfg.seed.wrapping_add(r as u64),
                ..cfg.study.protocol.clone()
            };
            let input = StudyInput {
                truth: Some(&sc.truth),
                oracle: Some(&sc.oracle),
                psi_truth: sc.psi.first(),
                ..StudyInput::new(&sc.data)
            };
            Ok((run_study(&input, &cfg.study.methods, &protocol)?, r))
        })
        .collect();
    let mut out = StudyTables::default();
    for rep in reps {
        let (study, r) = rep?;
        out.rows.extend(study.rows.into_iter().map(|row| ResultRow { window_start: r, ..row }));
        out.failures.extend(study.failures);
        out.windows.push((r, format!("replicate {r}")));
    }
    Ok(out)
}

fn dataset_study(cfg: &RunConfig, file: &DatasetFile) -> Result<StudyTables> {
    let data = file.observations()?;
    let truth = file.truth_vectors();
    let oracle = file.oracle_vectors();
    let psi: Option<DMatrix<f64>> = file.psi_matrices().and_then(|p| p.into_iter().next());
    let input = StudyInput {
        truth: truth.as_deref(),
        oracle: oracle.as_deref(),
        psi_truth: psi.as_ref(),
        maturities: file.maturities.as_deref(),
        ..StudyInput::new(&data)
    };
    let protocol = StudyProtocol {
        seed: cfg.seed,
        ..cfg.study.protocol.clone()
    };
    let study = run_study(&input, &cfg.study.methods, &protocol)?;
    Ok(StudyTables {
        rows: study.rows,
        failures: study.failures,
        windows: vec![(protocol.start, "data".into())],
    })
}

/// Rolling windows over ingested yields, one study per window.
pub fn yield_study(cfg: &RunConfig) -> Result<StudyTables> {
    let src = cfg.yields.as_ref().context("no yield source configured")?;
    let mut dict = MaturityDictionary::default();
    dict.0.extend(src.dictionary.clone());
    let opts = IngestOptions {
        dictionary: dict,
        skip_lines: src.skip_lines,
        ..IngestOptions::new(src.kind)
    };
    let ds = io::ingest_yields(&src.path, &opts)?;
    let data = ds.to_observations()?;
    let w = &cfg.study.windows;
    let windows = ds.windows(w.first, w.count, w.months, &cfg.study.protocol.horizons);
    if windows.is_empty() {
        bail!("no estimation window of {} months from {} has data", w.months, w.first);
    }
    let mut out = StudyTables::default();
    for win in windows {
        let protocol = StudyProtocol {
            seed: cfg.seed,
            refit: cfg.study.protocol.refit,
            ..win.protocol
        };
        let input = StudyInput {
            maturities: Some(&ds.maturities),
            ..StudyInput::new(&data)
        };
        let study = run_study(&input, &cfg.study.methods, &protocol)?;
        out.rows.extend(study.rows);
        out.failures.extend(study.failures);
        out.windows.push((protocol.start, win.label));
    }
    Ok(out)
}

pub fn run_study_tables(cfg: &RunConfig) -> Result<StudyTables> {
    if cfg.yields.is_some() {
        yield_study(cfg)
    } else if cfg.data.is_some() {
        dataset_study(cfg, &load_dataset(cfg)?)
    } else {
        simulation_study(cfg)
    }
}

#[derive(Debug, Serialize)]
struct Ordering {
    metric: String,
    horizon: usize,
    /// `(method, median)` sorted ascending.
    medians: Vec<(String, f64)>,
}

fn orderings(rows: &[ResultRow]) -> Vec<Ordering> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in rows {
        if (r.metric == "msfe" || r.metric == "mse_psi") && !keys.contains(&(r.metric.clone(), r.horizon)) {
            keys.push((r.metric.clone(), r.horizon));
        }
    }
    keys.into_iter()
        .map(|(metric, horizon)| {
            let mut medians = median_by_method(rows, &metric, horizon);
            medians.sort_by(|a, b| a.1.total_cmp(&b.1));
            Ordering { metric, horizon, medians }
        })
        .collect()
}

pub fn study(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    prepare_out(&cfg.out)?;
    let tables = run_study_tables(cfg)?;
    let meta = metadata(cfg, "study");
    let csv = cfg.out.join("results.csv");
    io::write_rows_csv(&csv, &tables.rows)?;
    let side = write_sidecar(&csv, &meta)?;
    let mut with_windows = meta.clone();
    with_windows["windows"] = serde_json::to_value(&tables.windows)?;
    let json = cfg.out.join("results.json");
    io::write_rows_json(&json, &tables.rows, with_windows)?;
    let fails = cfg.out.join("failures.json");
    io::write_json(&fails, &serde_json::json!({ "metadata": meta, "failures": tables.failures }))?;
    let ord = cfg.out.join("ordering.json");
    io::write_json(&ord, &serde_json::json!({ "metadata": meta, "orderings": orderings(&tables.rows) }))?;
    Ok(vec![csv, side, json, fails, ord])
}

pub fn quadstudy(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    prepare_out(&cfg.out)?;
    let q = &cfg.quad;
    let mut rng = rng_for(cfg.seed, 2);
    let rows = quad_error_study(&q.kernel, q.nu, q.sigma, q.rho2, &q.m_list, q.replicates, &mut rng)?;
    let path = cfg.out.join("quad.csv");
    write_csv(&path, &rows)?;
    let side = write_sidecar(&path, &metadata(cfg, "quadstudy"))?;
    Ok(vec![path, side])
}
