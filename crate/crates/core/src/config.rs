//! Run configuration: one TOML file with nested sections, overridable by
//! command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BenchConfig;
use crate::model::ModelConfig;
use crate::synthbench::BenchmarkConfig;
use crate::trainer::{EvalOptions, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Root of every output (images/, reports/, manifests/, checkpoints/).
    pub out: PathBuf,
    /// Benchmark directory written by `gen-data` (default `<out>/data`).
    pub data: Option<PathBuf>,
    /// Checkpoint read by sample/eval/refine/cache-sim.
    pub checkpoint: Option<PathBuf>,
    /// Second checkpoint for paired comparisons (text-dominance).
    pub checkpoint_b: Option<PathBuf>,
    /// Split evaluated or sampled.
    pub split: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            data: None,
            checkpoint: None,
            checkpoint_b: None,
            split: "test".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub flow: EvalOptions,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub data: BenchmarkConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let key = e.span().map(|s| text[s].trim().to_string()).unwrap_or_default();
            Error::config(if key.is_empty() { "config".to_string() } else { key }, e.message())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.data.hw != self.model.image_hw {
            return Err(Error::config(
                "data.hw",
                format!("{:?} differs from model.image_hw {:?}", self.data.hw, self.model.image_hw),
            ));
        }
        if self.flow.steps == 0 {
            return Err(Error::config("flow.steps", "must be >= 1"));
        }
        if self.flow.seeds == 0 {
            return Err(Error::config("flow.seeds", "must be >= 1"));
        }
        if self.flow.cached && !self.model.cond_attention.is_causal() {
            return Err(Error::config("flow.cached", "condition reuse needs a causal condition mask"));
        }
        if self.bench.trials == 0 || self.bench.steps == 0 || self.bench.resolutions.is_empty() {
            return Err(Error::config("bench", "trials, steps and resolutions must be non-empty"));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.paths.data.clone().unwrap_or_else(|| self.paths.out.join("data"))
    }

    /// Directory of one split, or a config error naming the key.
    pub fn split_dir(&self, split: &str) -> Result<PathBuf> {
        let dir = self.data_dir().join(split);
        if !dir.join("metadata.jsonl").is_file() {
            return Err(Error::config("paths.data", format!("no benchmark split at {}", dir.display())));
        }
        Ok(dir)
    }

    /// Checkpoint path, or a config error naming the key.
    pub fn checkpoint(&self) -> Result<&Path> {
        let p = self
            .paths
            .checkpoint
            .as_deref()
            .ok_or_else(|| Error::config("paths.checkpoint", "not set"))?;
        if !p.is_file() {
            return Err(Error::config("paths.checkpoint", format!("{} does not exist", p.display())));
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_unknown_keys() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let err = RunConfig::from_toml("[model]\nd_modle = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");
        assert!(err.to_string().contains("d_modle"), "{err}");
    }

    #[test]
    fn partial_sections_take_defaults() {
        let cfg = RunConfig::from_toml("[train]\nlr = 0.01\n[flow]\nsteps = 5\n").unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.flow.steps, 5);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn missing_checkpoint_names_key() {
        let err = RunConfig::default().checkpoint().unwrap_err();
        assert!(err.to_string().contains("paths.checkpoint"));
    }
}
