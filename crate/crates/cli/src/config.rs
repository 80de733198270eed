use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cvdm_core::convergence::ConvergenceConfig;
use cvdm_core::metrics::MetricConfig;
use cvdm_core::qpi::DatasetConfig;
use cvdm_core::rng::child_seed;
use cvdm_core::sampler::SamplerConfig;
use cvdm_core::trainer::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

pub const CONFIG_COPY: &str = "config.toml";

/// Derived seeds are kept within the TOML integer range.
const TOML_SEED_MASK: u64 = i64::MAX as u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub run: PathBuf,
    /// Defaults to `<run>/dataset`.
    pub dataset: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            run: PathBuf::from("run"),
            dataset: None,
        }
    }
}

impl Paths {
    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.run.join("dataset"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Dataset split used by `sample`, `eval` and `schedule-report`.
    pub split: String,
    /// Only the first this many items of the split, when set.
    pub limit: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: "test".into(),
            limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub points: usize,
    /// Index of the condition within the evaluation split.
    pub index: usize,
    /// Target values above this mark the region of interest.
    pub mask_threshold: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            points: 101,
            index: 0,
            mask_threshold: 0.5,
        }
    }
}

/// The whole run description. The stage seeds inside `train` and `sampler`
/// are derived from the top-level `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    pub metrics: MetricConfig,
    pub report: ReportConfig,
    pub convergence: ConvergenceConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        cfg.resolve();
        Ok(cfg)
    }

    /// Applies derived settings; call again after changing `seed` or `data`.
    pub fn resolve(&mut self) {
        self.model.condition_channels = self.data.task.condition_channels();
        self.train.seed = child_seed(self.seed, "train") & TOML_SEED_MASK;
        self.sampler.seed = child_seed(self.seed, "sampler") & TOML_SEED_MASK;
    }

    pub fn data_seed(&self) -> u64 {
        child_seed(self.seed, "data")
    }

    pub fn convergence_seed(&self) -> u64 {
        child_seed(self.seed, "convergence")
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Writes the resolved configuration into `dir`.
    pub fn save_copy(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_COPY), self.to_toml()?)?;
        Ok(())
    }
}
