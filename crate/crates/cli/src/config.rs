//! Experiment configuration (JSON).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rmldp_core::cumulant::ModelOptions;
use rmldp_core::ensemble::{EnsembleConfig, MatrixEnsemble};
use serde::{Deserialize, Serialize};

/// Deviation `l_n` as a function of `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum LRule {
    Fixed { value: f64 },
    /// `c / √n`
    InvSqrt { c: f64 },
    /// `c · ln n / n`
    LogOverN { c: f64 },
}

impl Default for LRule {
    fn default() -> Self {
        LRule::Fixed { value: 0.0 }
    }
}

impl LRule {
    pub fn at(&self, n: usize) -> f64 {
        let nf = n as f64;
        match *self {
            LRule::Fixed { value } => value,
            LRule::InvSqrt { c } => c / nf.sqrt(),
            LRule::LogOverN { c } => c * nf.ln() / nf,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    UpperTail,
    LowerTail,
    LocalLimit { a: f64, delta: f64 },
    Norm,
}

impl Target {
    pub fn id(&self) -> String {
        match self {
            Target::UpperTail => "upper_tail".into(),
            Target::LowerTail => "lower_tail".into(),
            Target::LocalLimit { a, delta } => format!("local_limit_a{a}_d{delta}"),
            Target::Norm => "norm".into(),
        }
    }

    /// Whether the target is defined at this sign of `s`.
    pub fn accepts(&self, s: f64) -> bool {
        match self {
            Target::LowerTail => s < 0.0,
            _ => s > 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMethod {
    /// Enumeration when affordable, tilted sampling otherwise.
    #[default]
    Auto,
    Exhaustive,
    Crude,
    Tilted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    #[serde(default)]
    pub method: EstimatorMethod,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub workers: usize,
}

fn default_samples() -> usize {
    10_000
}

fn default_seed() -> u64 {
    20_240_601
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { method: EstimatorMethod::Auto, samples: default_samples(), seed: default_seed(), workers: 0 }
    }
}

/// Pass/fail checks evaluated by `run`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum Check {
    /// Estimate/prediction ratio inside `band` for rows of `target` (at `n` if given).
    RatioBand { target: String, n: Option<usize>, band: [f64; 2] },
    /// `|ratio − 1|` non-increasing in `n` for every curve of `target`.
    RatioTrend { target: String },
    /// `|ln(estimate)/n − ln(prediction)/n| ≤ tolerance` for rows of `target` at `n`.
    RateGap { target: String, n: usize, tolerance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    /// Ensemble JSON, relative to the config file.
    pub ensemble: PathBuf,
    pub s_values: Vec<f64>,
    pub n_values: Vec<usize>,
    #[serde(default)]
    pub l_rule: LRule,
    /// Multipliers of `l_n`; `[1]` by default.
    #[serde(default = "default_signs")]
    pub l_signs: Vec<f64>,
    /// Start directions; `[1, …, 1]` by default.
    #[serde(default)]
    pub directions: Vec<Vec<f64>>,
    pub targets: Vec<Target>,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default)]
    pub model: Option<ModelOptions>,
    #[serde(default)]
    pub checks: Vec<Check>,
    /// Output directory, relative to the working directory.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_signs() -> Vec<f64> {
    vec![1.0]
}

fn default_resolution() -> usize {
    512
}

/// A parsed config plus the directory it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
    pub ensemble: MatrixEnsemble,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).context("parsing experiment config")
    }

    pub fn model_options(&self) -> ModelOptions {
        let mut m = self.model.unwrap_or_default();
        m.workers = self.estimator.workers;
        m
    }

    /// Structural checks that need no files.
    pub fn validate(&self) -> Result<()> {
        if self.s_values.is_empty() || self.n_values.is_empty() || self.targets.is_empty() {
            bail!("s_values, n_values and targets must be non-empty");
        }
        if self.n_values.contains(&0) {
            bail!("n_values must be positive");
        }
        if self.estimator.samples < 100 {
            bail!("estimator.samples must be at least 100 (got {})", self.estimator.samples);
        }
        let m = self.model.unwrap_or_default();
        for &s in &self.s_values {
            if !(s > m.s_min && s < m.s_max) || s == 0.0 {
                bail!("s = {s} outside the solver range ({}, {}) or zero", m.s_min, m.s_max);
            }
        }
        if self.l_signs.is_empty() {
            bail!("l_signs must be non-empty");
        }
        for t in &self.targets {
            if let Target::LocalLimit { delta, .. } = t {
                if !(*delta > 0.0) {
                    bail!("local_limit delta must be positive");
                }
            }
            if !self.s_values.iter().any(|&s| t.accepts(s)) {
                bail!("target {} has no s of the right sign", t.id());
            }
        }
        Ok(())
    }
}

pub fn load(path: &Path) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let config = ExperimentConfig::from_json(&text)?;
    config.validate()?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let epath = base_dir.join(&config.ensemble);
    let etext = std::fs::read_to_string(&epath).with_context(|| format!("reading ensemble {}", epath.display()))?;
    let ecfg: EnsembleConfig = serde_json::from_str(&etext).with_context(|| format!("parsing ensemble {}", epath.display()))?;
    let ensemble = MatrixEnsemble::from_config(&ecfg).with_context(|| format!("validating ensemble {}", epath.display()))?;
    for x in &config.directions {
        if x.len() != ensemble.dim() {
            bail!("direction {x:?} has the wrong dimension (ensemble is {}-dimensional)", ensemble.dim());
        }
    }
    Ok(LoadedConfig { config, base_dir, ensemble })
}
