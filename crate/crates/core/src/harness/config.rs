//! Experiment configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::buffers::DEFAULT_CAPACITY;
use crate::error::{Error, Result};
use crate::scenarios::{self, ScenarioKind, SynthOptions, TaskStream};
use crate::strategies::{self, Hyper};

/// Where the task stream comes from: a manifest on disk or one of the
/// synthetic generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    /// Dataset manifest; relative paths resolve against the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Domains (domain-cl) or tasks (organ-cl) of a synthetic stream.
    #[serde(default = "default_tasks")]
    pub tasks: usize,
    /// Images per domain or task; per class group in class-cl.
    #[serde(default = "default_images")]
    pub images: usize,
    /// Class groups of a synthetic class-cl stream, one per task.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_groups: Vec<Vec<u32>>,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default = "default_gap")]
    pub mean_gap: f64,
    #[serde(default)]
    pub shared_pool: bool,
    /// Standardize each synthetic image to zero mean and unit variance, as
    /// manifest ingestion always does.
    #[serde(default = "default_true")]
    pub standardize: bool,
}

fn default_tasks() -> usize {
    3
}
fn default_images() -> usize {
    40
}
fn default_size() -> usize {
    64
}
fn default_gap() -> f64 {
    0.3
}
fn default_true() -> bool {
    true
}

impl ScenarioSpec {
    /// Build the stream for one seed. Synthetic streams depend on the seed;
    /// manifest streams do not.
    pub fn build(&self, seed: u64) -> Result<TaskStream> {
        let stream = match &self.manifest {
            Some(path) => scenarios::ingest_dataset(path)?,
            None => {
                let opts = SynthOptions {
                    size: self.size,
                    mean_gap: self.mean_gap,
                    shared_pool: self.shared_pool,
                };
                let mut s = match self.kind {
                    ScenarioKind::DomainCl => scenarios::make_domain_cl(self.tasks, self.images, seed, &opts)?,
                    ScenarioKind::ClassCl => scenarios::make_class_cl(&self.class_groups, self.images, seed, &opts)?,
                    ScenarioKind::OrganCl => scenarios::make_organ_cl(self.tasks, self.images, seed, &opts)?,
                };
                if self.standardize {
                    for task in &mut s.tasks {
                        for x in task.train.iter_mut().chain(&mut task.val).chain(&mut task.test) {
                            x.image.standardize();
                        }
                    }
                }
                s
            }
        };
        if stream.kind != self.kind {
            return Err(Error::Config(format!(
                "manifest describes a {} stream, config says {}",
                stream.kind, self.kind
            )));
        }
        Ok(stream)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub name: String,
    #[serde(default)]
    pub params: Hyper,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Optimizer {
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for Optimizer {
    fn default() -> Self {
        Self {
            lr: 0.05,
            batch_size: 8,
        }
    }
}

/// Network depth and width; the input size follows the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub levels: usize,
    pub base_width: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            levels: 4,
            base_width: 8,
        }
    }
}

/// Task order: an explicit 1-based permutation, `"identity"`, or
/// `"random:k"` for the `k`-th seeded random permutation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskOrder {
    Explicit(Vec<usize>),
    Named(String),
}

impl TaskOrder {
    pub fn resolve(&self, n_tasks: usize) -> Result<Vec<usize>> {
        match self {
            TaskOrder::Explicit(v) => Ok(v.clone()),
            TaskOrder::Named(s) if s == "identity" => Ok((1..=n_tasks).collect()),
            TaskOrder::Named(s) => {
                let k = s
                    .strip_prefix("random:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| Error::Config(format!("order '{s}' is neither 'identity' nor 'random:k'")))?;
                Ok(scenarios::random_orders(n_tasks, k + 1, 0).swap_remove(k))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSpec,
    pub strategy: StrategySpec,
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub model: ModelSpec,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<TaskOrder>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

fn default_capacity() -> usize {
    DEFAULT_CAPACITY
}
fn default_epochs() -> usize {
    5
}
fn default_out() -> PathBuf {
    PathBuf::from("results")
}

impl ExperimentConfig {
    /// Parse a config file; relative manifest and output paths resolve
    /// against the file's directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(m) = &cfg.scenario.manifest {
            if m.is_relative() {
                cfg.scenario.manifest = Some(base.join(m));
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.optimizer.lr)));
        }
        if self.optimizer.batch_size == 0 || self.capacity == 0 {
            return Err(Error::Config("batch size and capacity must be positive".into()));
        }
        if self.model.levels == 0 || self.model.base_width == 0 {
            return Err(Error::Config("model levels and base width must be positive".into()));
        }
        if self.scenario.manifest.is_none() && self.scenario.kind == ScenarioKind::ClassCl && self.scenario.class_groups.is_empty() {
            return Err(Error::Config("synthetic class-cl needs class_groups".into()));
        }
        let s = strategies::create(&self.strategy.name, &self.strategy.params, self.capacity)?;
        if !s.supports(self.scenario.kind) {
            return Err(Error::Config(format!(
                "strategy {} does not apply to {} streams",
                self.strategy.name, self.scenario.kind
            )));
        }
        Ok(())
    }

    /// Digest of everything that determines a run's artifacts except the
    /// seed list and the output location.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.seeds.clear();
        c.out_dir = PathBuf::new();
        Ok(short_digest(c.to_toml()?.as_bytes()))
    }
}

pub(crate) fn short_digest(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}
