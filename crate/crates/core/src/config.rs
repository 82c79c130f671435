//! One JSON file holding every tunable of the pipeline.
//!
//! Missing sections and fields take their defaults, so `{}` is a complete
//! configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::enhance::{SceneSampling, SharpenConfig};
use crate::error::{param, Error, Result};
use crate::fit::FitConfig;
use crate::imaging::BlurConfig;
use crate::losses::{DistillConfig, LossConfig};
use crate::masking::TgamState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TgamConfig {
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for TgamConfig {
    fn default() -> Self {
        Self { beta: 0.98, epsilon: 5.0 }
    }
}

impl TgamConfig {
    pub fn state(&self) -> Result<TgamState> {
        TgamState::new(self.beta, self.epsilon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RotationConfig {
    /// Angles are drawn uniformly from `[-gamma, gamma]` degrees.
    pub gamma: f64,
}

impl Default for RotationConfig {
    fn default() -> Self {
        Self { gamma: 15.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathConfig {
    pub data_root: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub loss: LossConfig,
    /// Blur applied to teacher warps before the loss feeding the anomaly mask.
    pub blur: BlurConfig,
    pub tgam: TgamConfig,
    pub distill: DistillConfig,
    pub sharpen: SharpenConfig,
    pub scene_sampling: SceneSampling,
    pub rotation: RotationConfig,
    pub fit: FitConfig,
    pub paths: PathConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.blur.validate()?;
        self.tgam.state()?;
        self.distill.validate()?;
        self.sharpen.lowpass.validate()?;
        if self.scene_sampling.stride == 0 {
            return param("scene sampling stride must be at least 1");
        }
        if !(self.rotation.gamma >= 0.0 && self.rotation.gamma.is_finite()) {
            return param(format!("rotation gamma must be finite and non-negative, got {}", self.rotation.gamma));
        }
        self.fit.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = PipelineConfig::from_json("{}").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.loss.alpha, 0.85);
        assert_eq!((cfg.tgam.beta, cfg.tgam.epsilon), (0.98, 5.0));
        assert_eq!(cfg.distill.tau, 0.03);
        assert_eq!(cfg.fit.smoothness_weight, 1e-3);
    }

    #[test]
    fn partial_sections_merge_with_defaults() {
        let cfg = PipelineConfig::from_json(r#"{"tgam": {"epsilon": 10}, "rotation": {"gamma": 30}}"#).unwrap();
        assert_eq!(cfg.tgam.epsilon, 10.0);
        assert_eq!(cfg.tgam.beta, 0.98);
        assert_eq!(cfg.rotation.gamma, 30.0);
    }

    #[test]
    fn rejects_bad_values_and_unknown_sections() {
        assert!(matches!(PipelineConfig::from_json(r#"{"tgam": {"beta": 1.5}}"#), Err(Error::Parameter(_))));
        assert!(matches!(PipelineConfig::from_json(r#"{"tgma": {}}"#), Err(Error::Format(_))));
        assert!(matches!(PipelineConfig::from_json("not json"), Err(Error::Format(_))));
    }

    #[test]
    fn round_trips_through_json() {
        let mut cfg = PipelineConfig::default();
        cfg.distill.tau = 0.05;
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_json(&text).unwrap(), cfg);
    }
}
