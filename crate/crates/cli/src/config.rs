//! Declarative experiment configuration (TOML, strict schema).

use std::path::{Path, PathBuf};

use npse_core::evaluation::{C2stConfig, MmdEstimator};
use npse_core::oracles::RwmConfig;
use npse_core::samplers::{SamplerConfig, SamplerKind};
use npse_core::schedule::ScheduleSpec;
use npse_core::score_net::NetworkConfig;
use npse_core::tasks::task_by_name;
use npse_core::training::TrainingConfig;
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fnpse,
    Pfnpse,
    Npse,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Fnpse => "fnpse",
            Method::Pfnpse => "pfnpse",
            Method::Npse => "npse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Mmd,
    C2st,
}

/// Counts may be written as integers or as integral decimals with an
/// exponent (`budget = 1e4`).
fn count<'de, D: Deserializer<'de>>(d: D) -> Result<usize, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Num {
        Int(i64),
        Float(f64),
    }
    let v = match Num::deserialize(d)? {
        Num::Int(i) => i as f64,
        Num::Float(f) => f,
    };
    if v < 0.0 || v.fract() != 0.0 || !v.is_finite() || v > 1e15 {
        return Err(serde::de::Error::custom(format!("{v} is not a non-negative integer")));
    }
    Ok(v as usize)
}

fn counts<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<usize>, D::Error> {
    #[derive(Deserialize)]
    struct W(#[serde(deserialize_with = "count")] usize);
    Ok(Vec::<W>::deserialize(d)?.into_iter().map(|w| w.0).collect())
}

fn opt_count<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
    count(d).map(Some)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub hidden_dim: usize,
    pub emb_dim: usize,
    pub depth: usize,
    pub time_emb_dim: usize,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection { hidden_dim: 128, emb_dim: 64, depth: 3, time_emb_dim: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let d = TrainingConfig::default();
        TrainingSection { batch_size: d.batch_size, max_epochs: d.max_epochs, patience: d.patience, val_fraction: d.val_fraction }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub kind: SamplerKind,
    #[serde(rename = "L")]
    pub steps_per_level: usize,
    #[serde(rename = "a")]
    pub step_scale: f64,
    pub n_samples: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = SamplerConfig::default();
        SamplerSection { kind: d.kind, steps_per_level: d.steps_per_level, step_scale: d.step_scale, n_samples: d.n_samples }
    }
}

impl SamplerSection {
    pub fn with_seed(&self, seed: u64) -> SamplerConfig {
        SamplerConfig { kind: self.kind, steps_per_level: self.steps_per_level, step_scale: self.step_scale, n_samples: self.n_samples, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub metrics: Vec<Metric>,
    pub estimator: MmdEstimator,
    pub c2st: C2stConfig,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection { metrics: vec![Metric::Mmd], estimator: MmdEstimator::Unbiased, c2st: C2stConfig::default() }
    }
}

/// Axes swept by `sweep` in addition to `seeds` and `n_obs`. Missing axes
/// fall back to the scalar top-level values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub methods: Vec<Method>,
    #[serde(deserialize_with = "counts")]
    pub budgets: Vec<usize>,
    /// Subset sizes for `pfnpse`.
    #[serde(deserialize_with = "counts")]
    pub m_values: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: String,
    pub method: Method,
    #[serde(default, deserialize_with = "opt_count")]
    pub m_max: Option<usize>,
    #[serde(deserialize_with = "count")]
    pub budget: usize,
    #[serde(default = "default_lr_grid")]
    pub lr_grid: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(deserialize_with = "counts")]
    pub n_obs: Vec<usize>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub oracle: RwmConfig,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub grid: GridSection,
}

fn default_lr_grid() -> Vec<f64> {
    vec![1e-4]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// One fully resolved training setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Setting {
    pub method: Method,
    pub budget: usize,
    pub m_max: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn max_n_obs(&self) -> usize {
        self.n_obs.iter().copied().max().unwrap_or(0)
    }

    /// Set size implied by the method; `m` is the requested value for `pfnpse`.
    pub fn resolve_m(&self, method: Method, m: Option<usize>) -> CliResult<usize> {
        let n_max = self.max_n_obs();
        match (method, m) {
            (Method::Fnpse, None | Some(1)) => Ok(1),
            (Method::Fnpse, Some(m)) => Err(CliError::Config(format!("fnpse requires m_max = 1, got {m}"))),
            (Method::Npse, None) => Ok(n_max),
            (Method::Npse, Some(m)) if m == n_max => Ok(m),
            (Method::Npse, Some(m)) => Err(CliError::Config(format!("npse requires m_max = max(n_obs) = {n_max}, got {m}"))),
            (Method::Pfnpse, Some(m)) if 1 < m && m < n_max => Ok(m),
            (Method::Pfnpse, m) => Err(CliError::Config(format!("pfnpse requires 1 < m_max < max(n_obs) = {n_max}, got {m:?}"))),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        let task = task_by_name(&self.task)?;
        if self.n_obs.is_empty() || self.n_obs.contains(&0) {
            return bad("n_obs must be a non-empty list of positive counts".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|lr| !(*lr > 0.0 && lr.is_finite())) {
            return bad("lr_grid must hold positive learning rates".into());
        }
        self.resolve_m(self.method, self.m_max)?;
        for s in self.settings()? {
            self.training_config(s, self.lr_grid[0]).validate()?;
        }
        self.network_config(task.theta_dim(), task.x_dim(), 1).validate()?;
        self.schedule.build()?;
        self.sampler.with_seed(0).validate()?;
        if self.evaluation.metrics.is_empty() {
            return bad("evaluation.metrics must not be empty".into());
        }
        Ok(())
    }

    pub fn methods(&self) -> Vec<Method> {
        if self.grid.methods.is_empty() {
            vec![self.method]
        } else {
            self.grid.methods.clone()
        }
    }

    pub fn budgets(&self) -> Vec<usize> {
        if self.grid.budgets.is_empty() {
            vec![self.budget]
        } else {
            self.grid.budgets.clone()
        }
    }

    /// Every training setting of the sweep, in a fixed order.
    pub fn settings(&self) -> CliResult<Vec<Setting>> {
        let mut out = Vec::new();
        for method in self.methods() {
            let ms: Vec<usize> = match method {
                Method::Pfnpse if !self.grid.m_values.is_empty() => self.grid.m_values.clone(),
                Method::Pfnpse => vec![self.m_max.ok_or_else(|| CliError::Config("pfnpse needs m_max or grid.m_values".into()))?],
                _ => vec![self.resolve_m(method, None)?],
            };
            for budget in self.budgets() {
                for &m in &ms {
                    let m_max = self.resolve_m(method, Some(m))?;
                    for &seed in &self.seeds {
                        out.push(Setting { method, budget, m_max, seed });
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn m_max_resolved(&self) -> CliResult<usize> {
        self.resolve_m(self.method, self.m_max)
    }

    pub fn training_config(&self, s: Setting, lr: f64) -> TrainingConfig {
        TrainingConfig {
            budget: s.budget,
            m_max: s.m_max,
            batch_size: self.training.batch_size,
            lr,
            max_epochs: self.training.max_epochs,
            patience: self.training.patience,
            val_fraction: self.training.val_fraction,
            seed: s.seed,
        }
    }

    pub fn network_config(&self, theta_dim: usize, x_dim: usize, m_max: usize) -> NetworkConfig {
        let n = &self.network;
        NetworkConfig { theta_dim, x_dim, m_max, hidden_dim: n.hidden_dim, emb_dim: n.emb_dim, depth: n.depth, time_emb_dim: n.time_emb_dim }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Standalone sampler settings for `npse sample --sampler`.
pub fn load_sampler(path: &Path) -> CliResult<SamplerSection> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(toml::from_str(&text)?)
}

pub fn load_oracle(path: &Path) -> CliResult<RwmConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(toml::from_str(&text)?)
}
