//! Experiment configuration: a TOML document with every default written
//! back into `config.resolved`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estep::EStepBackend;
use crate::model::FeatureKind;
use crate::task::{EventSpec, TaskKind, TaskSpec};
use crate::train::MStepSpec;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "BRITE_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Brite,
    FilterSft,
    Restem,
    CondSft,
    IterativeDpo,
    BriteDpo,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Brite => "brite",
            Algorithm::FilterSft => "filter_sft",
            Algorithm::Restem => "restem",
            Algorithm::CondSft => "cond_sft",
            Algorithm::IterativeDpo => "iterative_dpo",
            Algorithm::BriteDpo => "brite_dpo",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelInit {
    #[serde(default = "tabular")]
    pub features: FeatureKind,
    /// Standard scale of the random initial weights; 0 gives the uniform model.
    #[serde(default)]
    pub init_scale: f64,
}

fn tabular() -> FeatureKind {
    FeatureKind::Tabular
}

impl Default for ModelInit {
    fn default() -> Self {
        ModelInit { features: FeatureKind::Tabular, init_scale: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoSettings {
    #[serde(default = "dpo_steps")]
    pub steps: usize,
    #[serde(default = "dpo_rate")]
    pub rate: f64,
    /// Softening applied to unverified outcomes for posterior candidates.
    #[serde(default = "dpo_penalty")]
    pub penalty: f64,
}

fn dpo_steps() -> usize {
    20
}
fn dpo_rate() -> f64 {
    2.0
}
fn dpo_penalty() -> f64 {
    8.0
}

impl Default for DpoSettings {
    fn default() -> Self {
        DpoSettings { steps: dpo_steps(), rate: dpo_rate(), penalty: dpo_penalty() }
    }
}

/// Long gradient ascent on the objective, compared against the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSettings {
    #[serde(default = "ref_steps")]
    pub steps: usize,
    #[serde(default = "ref_rate")]
    pub rate: f64,
}

fn ref_steps() -> usize {
    10_000
}
fn ref_rate() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub algorithm: Algorithm,
    pub task: TaskSpec,
    #[serde(default = "EventSpec::accepted")]
    pub event: EventSpec,
    #[serde(default)]
    pub model: ModelInit,
    #[serde(default = "exact")]
    pub estep: EStepBackend,
    #[serde(default = "closed_form")]
    pub mstep: MStepSpec,
    /// Reward temperature for weighted refits and the preference loss scale.
    #[serde(default = "unit")]
    pub beta: f64,
    pub iterations: usize,
    /// Samples per prompt per iteration for sampling algorithms.
    #[serde(default = "budget")]
    pub budget: usize,
    /// Fit this many draws from the posterior instead of the posterior itself.
    #[serde(default)]
    pub posterior_samples: Option<usize>,
    #[serde(default = "seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Write a checkpoint every `k` iterations; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub timing: bool,
    #[serde(default)]
    pub dpo: DpoSettings,
    #[serde(default)]
    pub reference: Option<ReferenceSettings>,
}

fn exact() -> EStepBackend {
    EStepBackend::Exact
}
fn closed_form() -> MStepSpec {
    MStepSpec::ClosedForm
}
fn unit() -> f64 {
    1.0
}
fn budget() -> usize {
    16
}
fn seeds() -> Vec<u64> {
    vec![0]
}

fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidConfig { field: field.into(), reason: reason.into() }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(invalid("name", "must be a non-empty file name"));
        }
        if !(self.beta > 0.0) {
            return Err(invalid("beta", format!("must be > 0, got {}", self.beta)));
        }
        if self.iterations < 1 {
            return Err(invalid("iterations", "must be >= 1"));
        }
        if self.budget < 1 {
            return Err(invalid("budget", "must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "needs at least one seed"));
        }
        if !(self.model.init_scale >= 0.0) {
            return Err(invalid("model.init_scale", "must be >= 0"));
        }
        self.mstep.validate()?;
        match &self.estep {
            EStepBackend::Planning { beta } if !(*beta > 0.0) => return Err(invalid("estep.beta", "must be > 0")),
            EStepBackend::PolicyGradient(pg) => pg.validate().map_err(|e| match e {
                Error::InvalidConfig { field, reason } => invalid(&format!("estep.{field}"), reason),
                other => other,
            })?,
            _ => {}
        }
        if self.posterior_samples == Some(0) {
            return Err(invalid("posterior_samples", "must be >= 1"));
        }
        if matches!(self.algorithm, Algorithm::IterativeDpo | Algorithm::BriteDpo) {
            if self.budget < 2 {
                return Err(invalid("budget", "preference rounds need >= 2 candidates"));
            }
            if !(self.dpo.rate > 0.0) {
                return Err(invalid("dpo.rate", "must be > 0"));
            }
            if !(self.dpo.penalty > 0.0) {
                return Err(invalid("dpo.penalty", "must be > 0"));
            }
        }
        if self.algorithm == Algorithm::CondSft && !matches!(self.task.generator, TaskKind::Tagged { .. }) {
            return Err(invalid("task.generator", "cond_sft needs a tagged task"));
        }
        Ok(())
    }

    /// `--out` if given, else the configured output, else `$BRITE_OUT/<name>`
    /// or `runs/<name>`.
    pub fn output_dir(&self, out: Option<&Path>) -> PathBuf {
        if let Some(p) = out {
            return p.to_path_buf();
        }
        if let Some(p) = &self.output {
            return p.clone();
        }
        let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(&self.name)
    }
}
