//! Experiment configuration (TOML). Every key is documented in `docs/config.md`.

use std::path::{Path, PathBuf};

use ape_core::{ModelConfig, PhantomSpec, SamplerConfig, SlidingWindowConfig, TrainConfig, TrainSetup};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_count: usize,
    pub eval_count: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_count: 50,
            eval_count: 20,
        }
    }
}

/// Landmark kinds usable as retrieval queries.
pub const LANDMARK_KINDS: [&str; 7] = ["center", "x-", "x+", "y-", "y+", "z-", "z+"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Fold size for few-shot localization.
    pub shots: usize,
    pub landmarks: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            shots: 5,
            landmarks: vec!["center".into()],
        }
    }
}

/// Output locations, relative to `--out` unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: PathBuf,
    pub run: PathBuf,
    pub embeddings: PathBuf,
    pub reports: PathBuf,
    /// Checkpoint to evaluate; defaults to the one in `run`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data: "data".into(),
            run: "run".into(),
            embeddings: "embeddings".into(),
            reports: "reports".into(),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub inference: SlidingWindowConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// The top-level seed drives every stream, including training batches.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn train_setup(&self) -> TrainSetup {
        TrainSetup {
            train: TrainConfig {
                seed: self.seed,
                ..self.train.clone()
            },
            model: self.model.clone(),
            sampler: self.sampler.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: ape_core::Error| CliError::Config(e.to_string());
        self.phantom.validate().map_err(cfg)?;
        self.train_setup().validate().map_err(cfg)?;
        self.inference.validate().map_err(cfg)?;
        let d = &self.dataset;
        if d.train_count == 0 {
            return Err(CliError::Config("dataset.train_count must be at least 1".into()));
        }
        if d.eval_count < 2 {
            return Err(CliError::Config("dataset.eval_count must be at least 2".into()));
        }
        if self.eval.shots == 0 || self.eval.shots >= d.eval_count {
            return Err(CliError::Config(format!(
                "eval.shots = {} must lie in [1, {}) (dataset.eval_count)",
                self.eval.shots, d.eval_count
            )));
        }
        if self.eval.landmarks.is_empty() {
            return Err(CliError::Config("eval.landmarks is empty".into()));
        }
        for l in &self.eval.landmarks {
            if !LANDMARK_KINDS.contains(&l.as_str()) {
                return Err(CliError::Config(format!(
                    "unknown landmark kind {l:?}; expected one of {LANDMARK_KINDS:?}"
                )));
            }
        }
        if let Some(c) = &self.paths.checkpoint {
            if !c.exists() {
                return Err(CliError::Config(format!("paths.checkpoint {} does not exist", c.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::parse("sed = 1").is_err());
        assert!(ExperimentConfig::parse("[train]\nstep = 10").is_err());
        let c = ExperimentConfig::parse("[train]\nsteps = 10\nvariant = \"naive\"").unwrap();
        assert_eq!(c.train.steps, 10);
    }

    #[test]
    fn inconsistent_settings_are_rejected() {
        let c = ExperimentConfig::parse("[train]\nvariant = \"naive\"\nlambda = 1.0").unwrap();
        assert!(c.validate().is_err());
        let c = ExperimentConfig::parse("[eval]\nshots = 20").unwrap();
        assert!(c.validate().is_err());
        let c = ExperimentConfig::parse("[eval]\nlandmarks = [\"apex\"]").unwrap();
        assert!(c.validate().is_err());
    }
}
