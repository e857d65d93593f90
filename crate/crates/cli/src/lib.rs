//! Command-line front end: configuration, flags and the output pipelines.
//!
//! Output files, all under `--out`:
//!
//! - `simulate`: `dataset.json` with times, grid, observations, the latent
//!   truth, oracle forecasts, the true kernels and a `metadata` block.
//! - `fit`: `draws.csv`, one row per kept draw. Columns are `draw`,
//!   `sigma_nu2`, `sigma_eta2` (FDLM only), `p_star`, `s_1..s_p`,
//!   `factor_var_1..J`, `lambda_psi_1..p`, `kappa_1..p`, `matern_s2` and
//!   `matern_rho2` (GP only), then `forecast_0..M-1`, the one-step forecast
//!   on the grid. `draws.schema.json` lists the columns with descriptions.
//!   `summary.json` holds posterior means of each kernel on the grid, lag
//!   inclusion frequencies, the observation scale and an ESS table.
//! - `forecast`: `forecast.csv` (a `label` column such as `h1@125`, then one
//!   column per grid point) and
//!   `bands.csv` with columns `horizon, tau, mean, pointwise_lower,
//!   pointwise_upper, simultaneous_lower, simultaneous_upper`.
//! - `study`: `results.csv` with columns `method, window_start, horizon,
//!   metric, value`; metrics are `msfe`, `rmsfe`, `records`, `failures` and
//!   `mse_psi` (horizon 0). `results.json`, `failures.json` and
//!   `ordering.json` (methods sorted by median metric) sit alongside.
//! - `quadstudy`: `quad.csv` with columns `m, r, s`.
//!
//! Every CSV gets a `<name>.meta.json` sidecar and every JSON a `metadata`
//! field carrying the effective configuration.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use gpfar::far::ModelKind;

pub use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "gpfar", version, about = "Bayesian functional autoregression: simulate, fit, forecast, compare")]
pub struct Cli {
    /// TOML or JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// fdlm-far or gp-far.
    #[arg(long, global = true, value_parser = parse_model)]
    pub model: Option<ModelKind>,
    #[arg(long, global = true)]
    pub pmax: Option<usize>,
    #[arg(long, global = true)]
    pub iters: Option<usize>,
    #[arg(long, global = true)]
    pub burn: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset JSON written by `simulate`.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Simulate one scenario and write dataset.json.
    Simulate,
    /// Run the sampler and write draws and a summary.
    Fit,
    /// Forecast from the end of the data with prediction bands.
    Forecast,
    /// Compare methods on simulated replicates, a dataset or yield windows.
    Study,
    /// Quadrature error against the fine reference grid.
    Quadstudy,
}

fn parse_model(s: &str) -> std::result::Result<ModelKind, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown model `{s}`"))
}

impl Cli {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            threads: self.threads,
            model: self.model,
            pmax: self.pmax,
            iters: self.iters,
            burn: self.burn,
            out: self.out.clone(),
            data: self.data.clone(),
        }
    }

    /// File values, then flags, validated.
    pub fn effective_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply(&self.overrides());
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn execute(command: Command, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().context("building thread pool")?;
    pool.install(|| match command {
        Command::Simulate => commands::simulate(cfg),
        Command::Fit => commands::fit(cfg),
        Command::Forecast => commands::forecast(cfg),
        Command::Study => commands::study(cfg),
        Command::Quadstudy => commands::quadstudy(cfg),
    })
}

pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let cfg = cli.effective_config()?;
    execute(cli.command, &cfg)
}
