//! One JSON file configuring a whole run, with dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::ActionCodecConfig;
use crate::decision::{DenoiserConfig, PolicyConfig, ScheduleConfig, TemplateMode, TrainConfig};
use crate::environment::{SamplerConfig, SyntheticSpec};
use crate::metrics::MetricsConfig;
use crate::perception::GapConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("override `{0}` is not of the form key=value")]
    OverrideSyntax(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { data: "data".into(), checkpoints: "checkpoints".into(), reports: "reports".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    /// Output length including the seed frames.
    pub frames: usize,
    pub template_mode: TemplateMode,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { frames: 128, template_mode: TemplateMode::Observed }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub codec: ActionCodecConfig,
    pub sampler: SamplerConfig,
    pub gap: GapConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub synth: SyntheticSpec,
    pub generate: GenerateConfig,
    pub metrics: MetricsConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// Sets the run seed and every seed derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    /// Applies `a.b.c=value`; the value is read as JSON, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, raw) = assignment.split_once('=').ok_or_else(|| ConfigError::OverrideSyntax(assignment.into()))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::OverrideSyntax(assignment.into()));
        }
        let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
        let mut tree = serde_json::to_value(&*self).expect("serializable");
        let mut node = &mut tree;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
        }
        *node = value;
        *self = serde_json::from_value(tree).map_err(|e| ConfigError::Parse(format!("{key}: {e}")))?;
        Ok(())
    }

    pub fn policy(&self) -> PolicyConfig {
        PolicyConfig {
            codec: self.codec,
            sampler: self.sampler,
            gap: self.gap.clone(),
            denoiser: self.denoiser,
            schedule: self.schedule,
        }
    }

    /// Every section plus the cross-field rules between them.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.policy().validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        let min = self.sampler.horizon + 1;
        if self.synth.n_frames < min {
            return Err(ConfigError::Invalid(format!(
                "synth.n_frames {} is below the minimum of {min} frames (horizon + 1)",
                self.synth.n_frames
            )));
        }
        if self.generate.frames < self.sampler.obs_len {
            return Err(ConfigError::Invalid(format!(
                "generate.frames {} is below the {} observed seed frames",
                self.generate.frames, self.sampler.obs_len
            )));
        }
        if self.metrics.feature_window == 0 || self.metrics.feature_dim == 0 || self.metrics.div_clip_len == 0 {
            return Err(ConfigError::Invalid("metrics window, feature_dim and div_clip_len must be positive".into()));
        }
        Ok(())
    }

    /// Short content hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("serializable");
        Sha256::digest(&json).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("train.learning_rate=0.001").unwrap();
        cfg.apply_override("gap.latent_dim=16").unwrap();
        cfg.apply_override("generate.template_mode=mean_pose").unwrap();
        cfg.apply_override("train.max_steps=5").unwrap();
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.gap.latent_dim, 16);
        assert_eq!(cfg.generate.template_mode, TemplateMode::MeanPose);
        assert_eq!(cfg.train.max_steps, Some(5));
        assert!(matches!(cfg.apply_override("train.lr=1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(cfg.apply_override("seed"), Err(ConfigError::OverrideSyntax(_))));
        assert!(matches!(cfg.apply_override("seed=abc"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn cross_field_rules() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("sampler.act_len=7").unwrap();
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.apply_override("schedule.inference_steps=101").unwrap();
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.apply_override("synth.n_frames=16").unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("17"), "{msg}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(RunConfig::from_json(r#"{"trian": {}}"#).is_err());
    }

    #[test]
    fn seed_propagates() {
        let mut cfg = RunConfig::default();
        cfg.set_seed(9);
        assert_eq!((cfg.seed, cfg.train.seed, cfg.synth.seed), (9, 9, 9));
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }
}
