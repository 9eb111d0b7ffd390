//! Experiment configuration, read from a sectioned TOML file.
//!
//! ```toml
//! [stream]
//! num_tasks = 10
//!
//! [optim]
//! learning_rate = 50.0
//!
//! [retention]
//! alpha = 20.0
//!
//! [ctan]
//! beta = 0.999
//! ```
//!
//! Every key is optional and falls back to its default; unknown sections or
//! keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{PretrainedInit, StreamConfig};
use crate::error::{Error, Result};
use crate::optim::OptimConfig;
use crate::retention::{AdvantageMode, RetentionConfig, DEFAULT_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CtanConfig {
    pub beta: f64,
    pub eps: f64,
}

impl Default for CtanConfig {
    fn default() -> Self {
        CtanConfig {
            beta: 0.999,
            eps: DEFAULT_EPS,
        }
    }
}

/// Normalization used by the RL arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationChoice {
    /// RaPO uses CTAN; GRPO and the gating variants use the group std.
    #[default]
    Default,
    BatchSigma,
    Ctan,
}

impl NormalizationChoice {
    pub fn resolve(self, default: AdvantageMode) -> AdvantageMode {
        match self {
            NormalizationChoice::Default => default,
            NormalizationChoice::BatchSigma => AdvantageMode::BatchSigma,
            NormalizationChoice::Ctan => AdvantageMode::Ctan,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sft_learning_rate: f64,
    pub normalization: NormalizationChoice,
    /// Compute the exact KL to the anchor for every step log.
    pub log_kl: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            sft_learning_rate: 20.0,
            normalization: NormalizationChoice::Default,
            log_kl: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub stream: StreamConfig,
    pub init: PretrainedInit,
    pub optim: OptimConfig,
    pub retention: RetentionConfig,
    pub ctan: CtanConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.retention.validate()?;
        if !(self.ctan.beta > 0.0 && self.ctan.beta < 1.0) {
            return Err(Error::config("ctan.beta must lie in (0, 1)"));
        }
        if !(self.ctan.eps > 0.0) {
            return Err(Error::config("ctan.eps must be positive"));
        }
        if !(self.run.sft_learning_rate >= 0.0) {
            return Err(Error::config("run.sft_learning_rate must be non-negative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.optim.group_size, 4);
        assert_eq!(cfg.retention.alpha, 20.0);
        assert_eq!(cfg.retention.lambda, 0.5);
        assert_eq!(cfg.ctan.beta, 0.999);
    }

    #[test]
    fn readme_lists_the_defaults() {
        let readme = include_str!("../../../README.md");
        let start = readme.find("```toml\n[stream]").expect("defaults block") + "```toml\n".len();
        let len = readme[start..].find("```").unwrap();
        let cfg = ExperimentConfig::from_toml_str(&readme[start..start + len]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn overrides_apply() {
        let cfg = ExperimentConfig::from_toml_str(
            "[retention]\nlambda = 0.25\n[ctan]\nbeta = 0.99\n[run]\nnormalization = \"batch_sigma\"\n",
        )
        .unwrap();
        assert_eq!(cfg.retention.lambda, 0.25);
        assert_eq!(cfg.ctan.beta, 0.99);
        assert_eq!(cfg.run.normalization, NormalizationChoice::BatchSigma);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(ExperimentConfig::from_toml_str("[optim]\nlearning_rat = 0.1\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[nope]\nx = 1\n").is_err());
    }

    #[test]
    fn invalid_values_are_errors() {
        assert!(ExperimentConfig::from_toml_str("[optim]\ngroup_size = 1\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[ctan]\nbeta = 1.0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[retention]\nalpha = 0.0\n").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }
}
