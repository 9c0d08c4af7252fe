//! One JSON document that pins down a whole experiment: dataset generation,
//! training, evaluation, and robustness sweeps. Parsing is strict — unknown
//! keys are rejected at every level so a typo can't silently revert a knob to
//! its default.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalkit::EvalConfig;
use crate::robustness::PerturbSpec;
use crate::trainer::TrainConfig;
use crate::worldgen::ProposalNoise;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad config json at {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How many scenes to render per split, and how honest the proposal oracle is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub train: usize,
    pub val: usize,
    pub noise: ProposalNoise,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            train: 512,
            val: 256,
            noise: ProposalNoise::default(),
        }
    }
}

/// The whole experiment. `seed` is the one mandatory field; every section
/// falls back to its defaults when absent. The experiment seed supersedes any
/// seed written inside a section, so a config file has exactly one seed knob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub robustness: PerturbSpec,
}

impl ExperimentConfig {
    /// All defaults under the given seed.
    pub fn with_seed(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            dataset: DatasetSection::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            robustness: PerturbSpec::default(),
        }
    }

    /// Copy the experiment seed into every section that carries its own.
    pub fn resolved(mut self) -> Self {
        self.train.seed = self.seed;
        self.robustness.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.dataset.train == 0 || self.dataset.val == 0 {
            return Err(ConfigError::Invalid(
                "dataset counts must be at least 1".into(),
            ));
        }
        if self.eval.ks.is_empty() || self.eval.ks.iter().any(|&k| k == 0) {
            return Err(ConfigError::Invalid(
                "eval.ks must be a nonempty list of positive cutoffs".into(),
            ));
        }
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.robustness
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}
