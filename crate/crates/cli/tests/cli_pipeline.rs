use std::path::Path;
use std::process::Command as Process;

use clap::Parser;
use gpfar_cli::{run, Cli};

const TINY: &str = r#"
seed = 11

[scenario]
t_fit = 20
n_forecast = 5
eval_size = 10
fine_size = 40
burn_in = 20
design = "dense"

[far]
burn = 100
iters = 200
lag_burn = 20
horizons = [1, 2]

[study]
replicates = 2
methods = ["oracle", { rival = "rw" }, { rival = "mean" }, { rival = "far-classic" }, { far = { burn = 50, iters = 100, lag_burn = 10 } }]

[quad]
m_list = [5, 10]
replicates = 5
"#;

fn cli(dir: &Path, args: &[&str]) -> Cli {
    let config = dir.join("run.toml");
    if !config.exists() {
        std::fs::write(&config, TINY).unwrap();
    }
    let mut full = vec!["gpfar".to_owned(), "--config".into(), config.display().to_string()];
    full.extend(args.iter().map(|s| s.to_string()));
    Cli::try_parse_from(full).unwrap()
}

fn simulate(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("sim");
    run(&cli(dir, &["--out", out.to_str().unwrap(), "simulate"])).unwrap();
    out.join("dataset.json")
}

#[test]
fn simulate_then_fit_writes_every_output() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path());
    let ds: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&data).unwrap()).unwrap();
    assert_eq!(ds["times"].as_array().unwrap().len(), 25);
    assert_eq!(ds["grid"].as_array().unwrap().len(), 10);
    assert!(ds["truth"].is_array() && ds["oracle"].is_array() && ds["psi"].is_array());
    assert_eq!(ds["metadata"]["config"]["seed"], 11);

    let out = dir.path().join("fit");
    let written = run(&cli(dir.path(), &["--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "fit"])).unwrap();
    assert_eq!(written.len(), 3);
    for f in ["draws.csv", "draws.schema.json", "summary.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let rows = gpfar::io::read_draws(&out.join("draws.csv")).unwrap();
    assert_eq!(rows["sigma_nu2"].len(), 200);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["kept"], 200);
    assert_eq!(summary["psi_mean"][0].as_array().unwrap().len(), 10);
    assert!(summary["ess"].as_array().unwrap().len() >= 2);
    assert_eq!(summary["metadata"]["config"]["far"]["iters"], 200);
}

#[test]
fn same_seed_gives_identical_draws() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path());
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        run(&cli(dir.path(), &["--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", "2", "fit"])).unwrap();
        bytes.push(std::fs::read(out.join("draws.csv")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);

    let out = dir.path().join("c");
    run(&cli(dir.path(), &["--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "12", "fit"])).unwrap();
    assert_ne!(bytes[0], std::fs::read(out.join("draws.csv")).unwrap());
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let c = cli(dir.path(), &["--seed", "5", "--iters", "300", "--pmax", "3", "--model", "gp-far", "simulate"]);
    let cfg = c.effective_config().unwrap();
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.far.iters, 300);
    assert_eq!(cfg.far.p_max, 3);
    assert!(cfg.far.select_lags);
    assert_eq!(cfg.far.model, gpfar::far::ModelKind::GpFar);
    assert_eq!(cfg.far.burn, 100);
    assert_eq!(cfg.scenario.t_fit, 20);
    let study_far = cfg
        .study
        .methods
        .iter()
        .find_map(|m| match m {
            gpfar::bench::StudyMethod::Far(f) => Some(f.clone()),
            _ => None,
        })
        .unwrap();
    assert_eq!(study_far.iters, 300);

    let plain = cli(dir.path(), &["simulate"]).effective_config().unwrap();
    assert_eq!(plain.seed, 11);
    assert_eq!(plain.far.iters, 200);
}

#[test]
fn bad_fields_are_reported_with_their_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[far]\niters = \"many\"\n").unwrap();
    let err = gpfar_cli::RunConfig::load(&path).unwrap_err().to_string();
    assert!(err.contains("far.iters"), "{err}");

    std::fs::write(&path, "[far.lag_prior]\nq02 = 0.1\n").unwrap();
    let err = gpfar_cli::RunConfig::load(&path).unwrap_err().to_string();
    assert!(err.contains("far.lag_prior") && err.contains("q02"), "{err}");

    let json = dir.path().join("bad.json");
    std::fs::write(&json, r#"{"scenario": {"design": "sparse"}}"#).unwrap();
    let err = gpfar_cli::RunConfig::load(&json).unwrap_err().to_string();
    assert!(err.contains("scenario.design"), "{err}");

    std::fs::write(&path, "[far]\np_max = 0\n").unwrap();
    let c = Cli::try_parse_from(["gpfar", "--config", path.to_str().unwrap(), "fit"]).unwrap();
    let err = format!("{:#}", c.effective_config().unwrap_err());
    assert!(err.contains("far") && err.contains("p_max"), "{err}");
}

#[test]
fn forecast_writes_bands() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path());
    let out = dir.path().join("fc");
    run(&cli(
        dir.path(),
        &["--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--iters", "1000", "forecast"],
    ))
    .unwrap();
    let mut r = csv::Reader::from_path(out.join("bands.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 20);
    for row in &rows {
        let v: Vec<f64> = (2..7).map(|i| row[i].parse().unwrap()).collect();
        assert!(v[1] <= v[0] && v[0] <= v[2], "{row:?}");
        assert!(v[3] <= v[1] && v[2] <= v[4], "{row:?}");
    }
    assert!(out.join("forecast.csv").is_file());
    assert!(out.join("bands.csv.meta.json").is_file());

    let short = dir.path().join("short");
    let err = run(&cli(dir.path(), &["--data", data.to_str().unwrap(), "--out", short.to_str().unwrap(), "forecast"])).unwrap_err();
    assert!(format!("{err:#}").contains("1000"), "{err:#}");
}

#[test]
fn simulation_study_and_quadstudy_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("study");
    run(&cli(dir.path(), &["--out", out.to_str().unwrap(), "study"])).unwrap();
    let rows = gpfar::io::read_rows_csv(&out.join("results.csv")).unwrap();
    let starts: std::collections::BTreeSet<usize> = rows.iter().map(|r| r.window_start).collect();
    assert_eq!(starts.into_iter().collect::<Vec<_>>(), vec![0, 1]);
    for m in ["oracle", "rw", "mean", "far-classic", "fdlm-far(1)"] {
        assert!(rows.iter().any(|r| r.method == m && r.metric == "msfe"), "{m}");
    }
    assert!(rows.iter().any(|r| r.method == "fdlm-far(1)" && r.metric == "mse_psi"));
    let ordering: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("ordering.json")).unwrap()).unwrap();
    assert!(!ordering["orderings"].as_array().unwrap().is_empty());
    assert!(out.join("failures.json").is_file() && out.join("results.json").is_file());

    let q = dir.path().join("quad");
    run(&cli(dir.path(), &["--out", q.to_str().unwrap(), "quadstudy"])).unwrap();
    let text = std::fs::read_to_string(q.join("quad.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("m,r,s"));
}

#[test]
fn binary_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), TINY).unwrap();
    let out = dir.path().join("bin");
    let status = Process::new(env!("CARGO_BIN_EXE_gpfar"))
        .args(["--config", dir.path().join("run.toml").to_str().unwrap(), "--out", out.to_str().unwrap(), "simulate"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("dataset.json").is_file());

    let bad = Process::new(env!("CARGO_BIN_EXE_gpfar")).args(["--model", "nope", "fit"]).output().unwrap();
    assert!(!bad.status.success());
}

#[test]
fn readme_configs_parse() {
    let readme = include_str!("../../../README.md");
    let blocks: Vec<&str> = readme.split("```toml").skip(1).map(|b| b.split("```").next().unwrap()).collect();
    assert_eq!(blocks.len(), 2);
    let dir = tempfile::tempdir().unwrap();
    for (i, block) in blocks.iter().enumerate() {
        let path = dir.path().join(format!("readme{i}.toml"));
        std::fs::write(&path, block).unwrap();
        let cfg = gpfar_cli::RunConfig::load(&path).unwrap();
        cfg.validate().unwrap();
    }
}
