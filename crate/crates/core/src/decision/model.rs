//! A trained policy bundled with its data statistics.
//!
//! Saved as one GPK1 file: policy parameters under `gap/` and `denoiser/`,
//! normalization statistics and the mean-pose template under `stats/`, and
//! the policy configuration in the manifest metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{rollout, DecisionError, Policy, PolicyConfig};
use crate::codec::{GestureTemplate, MotionSequence, Normalizer};
use crate::numerics::{checkpoint, ParamStore, Tensor};

/// Which frames seed generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateMode {
    /// The first observed frames of the reference clip.
    #[default]
    Observed,
    /// The stored training-set mean pose, repeated.
    MeanPose,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: PolicyConfig,
    pub store: ParamStore,
    pub policy: Policy,
    pub normalizer: Normalizer,
    pub template: GestureTemplate,
}

impl TrainedModel {
    pub fn new(config: PolicyConfig, normalizer: Normalizer, template: GestureTemplate, seed: u64) -> Result<Self, DecisionError> {
        let mut store = ParamStore::new();
        let policy = Policy::new(&mut store, &config, seed)?;
        Ok(Self { config, store, policy, normalizer, template })
    }

    /// Rolls out `frames` frames in data units.
    ///
    /// Generation runs on normalized frames. The seed frames are the first
    /// observed frames of `reference` or the stored template repeated, per `mode`;
    /// `audio` and `phonemes` are indexed like the output frames.
    pub fn generate(
        &self,
        reference: Option<&MotionSequence>,
        audio: &Tensor,
        phonemes: &Tensor,
        frames: usize,
        mode: TemplateMode,
        seed: u64,
    ) -> Result<MotionSequence, DecisionError> {
        let n_obs = self.config.sampler.obs_len;
        let (initial, rate) = match (mode, reference) {
            (TemplateMode::Observed, Some(r)) => {
                if r.len() < n_obs {
                    return Err(DecisionError::Invalid(format!("reference has {} frames, need {n_obs}", r.len())));
                }
                (self.normalizer.normalize(&r.slice(0..n_obs)).into_frames(), r.frame_rate_hz())
            }
            (TemplateMode::Observed, None) => {
                return Err(DecisionError::Invalid("observed template mode needs a reference sequence".into()))
            }
            (TemplateMode::MeanPose, r) => {
                let rows = vec![self.template.template.clone(); n_obs];
                let rate = r.map_or(crate::codec::motion::DEFAULT_FRAME_RATE, |r| r.frame_rate_hz());
                (Tensor::from_rows(&rows)?, rate)
            }
        };
        let z = rollout(&self.policy, &self.store, &initial, audio, phonemes, &self.config.codec, frames, rate, seed)?;
        Ok(self.normalizer.denormalize(&z))
    }

    /// Writes the bundle; `extra` is merged into the manifest metadata.
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<(), DecisionError> {
        let mut all = self.store.clone();
        all.clear_grads();
        let row = |v: &[f64]| Tensor::matrix(1, v.len(), v.to_vec());
        all.insert("stats/mean", row(&self.normalizer.mean)?)?;
        all.insert("stats/std", row(&self.normalizer.std)?)?;
        all.insert("stats/template", row(&self.template.template)?)?;
        let mut meta = serde_json::json!({
            "config": self.config,
            "template_provenance": self.template.provenance,
        });
        if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
            m.extend(e);
        }
        checkpoint::save(path, &all, meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DecisionError> {
        let (saved, meta) = checkpoint::load(path)?;
        let config: PolicyConfig = serde_json::from_value(meta.get("config").cloned().unwrap_or_default())
            .map_err(|e| DecisionError::Format(format!("policy config: {e}")))?;
        let stat = |name: &str| -> Result<Vec<f64>, DecisionError> {
            Ok(saved
                .by_name(name)
                .ok_or_else(|| DecisionError::Format(format!("missing tensor {name}")))?
                .value
                .data()
                .to_vec())
        };
        let normalizer = Normalizer { mean: stat("stats/mean")?, std: stat("stats/std")? };
        let provenance = meta.get("template_provenance").and_then(|v| v.as_str()).unwrap_or("checkpoint");
        let template = GestureTemplate::new(stat("stats/template")?, provenance)?;
        let mut model = Self::new(config, normalizer, template, 0)?;
        for p in model.store.iter_mut() {
            let src = saved.by_name(&p.name).ok_or_else(|| DecisionError::Format(format!("missing tensor {}", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(DecisionError::Format(format!(
                    "tensor {} has shape {:?}, config expects {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
        Ok(model)
    }
}
