use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use gpfar::bench::{StudyMethod, StudyProtocol};
use gpfar::far::{FarConfig, ModelKind};
use gpfar::io::CurveKind;
use gpfar::rivals::RivalKind;
use gpfar::simlab::{KernelFamily, KernelSpec, ScenarioSpec};
use serde::{Deserialize, Serialize};

/// Everything a run needs; read from a TOML or JSON file, then overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub out: PathBuf,
    /// Dataset file written by `simulate` (JSON).
    pub data: Option<PathBuf>,
    pub yields: Option<YieldSource>,
    pub far: FarConfig,
    pub scenario: ScenarioSpec,
    pub study: StudyConfig,
    pub quad: QuadConfig,
    /// Level of forecast bands.
    pub band_level: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: None,
            out: PathBuf::from("out"),
            data: None,
            yields: None,
            far: FarConfig::default(),
            scenario: ScenarioSpec::default(),
            study: StudyConfig::default(),
            quad: QuadConfig::default(),
            band_level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct YieldSource {
    pub path: PathBuf,
    pub kind: CurveKind,
    #[serde(default)]
    pub skip_lines: usize,
    /// Extra column-name to months entries.
    #[serde(default)]
    pub dictionary: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub methods: Vec<StudyMethod>,
    /// Simulation replicates.
    pub replicates: usize,
    /// Rolling-origin settings; `start`, `n_fit` and `n_eval` are taken from
    /// the scenario or the yield windows.
    pub protocol: StudyProtocol,
    pub windows: WindowConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            methods: vec![
                StudyMethod::Far(FarConfig::default()),
                StudyMethod::Rival(RivalKind::FarClassic),
                StudyMethod::Rival(RivalKind::VarFpc),
                StudyMethod::Rival(RivalKind::VarY),
                StudyMethod::Rival(RivalKind::Ses),
                StudyMethod::Rival(RivalKind::Mean),
                StudyMethod::Rival(RivalKind::Rw),
                StudyMethod::Oracle,
            ],
            replicates: 10,
            protocol: StudyProtocol::default(),
            windows: WindowConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub first: NaiveDate,
    pub count: usize,
    pub months: u32,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            first: NaiveDate::from_ymd_opt(2003, 2, 1).expect("valid date"),
            count: 9,
            months: 18,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadConfig {
    pub kernel: KernelSpec,
    pub nu: f64,
    pub sigma: f64,
    pub rho2: f64,
    pub m_list: Vec<usize>,
    pub replicates: usize,
}

impl Default for QuadConfig {
    fn default() -> Self {
        Self {
            kernel: KernelSpec::new(KernelFamily::BimodalGaussian, 0.8),
            nu: 2.5,
            sigma: 0.01,
            rho2: 0.1,
            m_list: vec![5, 10, 15, 20, 25, 30, 50, 100],
            replicates: 100,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub model: Option<ModelKind>,
    pub pmax: Option<usize>,
    pub iters: Option<usize>,
    pub burn: Option<usize>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        let parsed = if is_json {
            let de = &mut serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize(de).map_err(|e| anyhow::anyhow!("{}: field `{}`: {}", path.display(), e.path(), e.inner()))
        } else {
            let de = toml::Deserializer::parse(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
            serde_path_to_error::deserialize(de).map_err(|e| anyhow::anyhow!("{}: field `{}`: {}", path.display(), e.path(), e.inner()))
        };
        parsed
    }

    /// Apply flag values. FAR settings reach the top-level model and every
    /// FAR entry of the study.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if o.threads.is_some() {
            self.threads = o.threads;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(d) = &o.data {
            self.data = Some(d.clone());
        }
        let far_targets = std::iter::once(&mut self.far).chain(self.study.methods.iter_mut().filter_map(|m| match m {
            StudyMethod::Far(c) => Some(c),
            _ => None,
        }));
        for c in far_targets {
            if let Some(m) = o.model {
                c.model = m;
            }
            if let Some(p) = o.pmax {
                c.p_max = p;
                c.select_lags = p > 1;
            }
            if let Some(i) = o.iters {
                c.iters = i;
            }
            if let Some(b) = o.burn {
                c.burn = b;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.far.validate().context("far")?;
        self.scenario.validate().context("scenario")?;
        for (i, m) in self.study.methods.iter().enumerate() {
            if let StudyMethod::Far(c) = m {
                c.validate().with_context(|| format!("study.methods[{i}]"))?;
            }
        }
        if self.study.replicates == 0 {
            bail!("study.replicates must be >= 1");
        }
        if self.quad.m_list.iter().any(|&m| m < 2) || self.quad.replicates == 0 {
            bail!("quad.m_list entries must be >= 2 and quad.replicates >= 1");
        }
        if !(self.band_level > 0.0 && self.band_level < 1.0) {
            bail!("band_level must lie in (0, 1)");
        }
        if self.threads == Some(0) {
            bail!("threads must be >= 1");
        }
        Ok(())
    }

    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "config": self,
            "version": env!("CARGO_PKG_VERSION"),
        })
    }
}
