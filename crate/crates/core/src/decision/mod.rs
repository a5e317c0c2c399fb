//! The conditional diffusion policy over action windows.

mod denoiser;
mod loss;
mod model;
mod rollout;
mod schedule;
mod train;

use std::cell::Cell;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{ActionCodecConfig, CodecError};
use crate::environment::{EnvError, SamplerConfig, WindowBatch};
use crate::numerics::rng::{derive_seed, seeded, standard_normal};
use crate::numerics::{Graph, Mode, NumericsError, ParamStore, Tensor, Var};
use crate::perception::{Gap, GapConfig};

pub use denoiser::{Denoiser, DenoiserConfig};
pub use loss::{loss_total, training_draw, LossParts, LossValues, LossWeights};
pub use model::{TemplateMode, TrainedModel};
pub use rollout::{decode_clamped, rollout};
pub use schedule::{ddim_step, forward_noise, DdimCoefficients, NoiseSchedule, ScheduleConfig};
pub use train::{train, Dataset, EpochRecord, StepRecord, TrainConfig, TrainReport};

#[derive(Debug, Error)]
pub enum DecisionError {
    #[error("diffusion step {k} outside 1..={max}")]
    StepOutOfRange { k: usize, max: usize },
    #[error("reverse step has sigma {sigma} but no noise was supplied")]
    MissingNoise { sigma: f64 },
    #[error("loss became non-finite at step {step}")]
    NonFinite { step: u64 },
    #[error("dataset yields no training windows")]
    EmptyDataset,
    #[error("invalid policy input: {0}")]
    Invalid(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Every setting that shapes the policy's parameters or outputs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub codec: ActionCodecConfig,
    pub sampler: SamplerConfig,
    pub gap: GapConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), DecisionError> {
        self.codec.validate()?;
        self.sampler.validate()?;
        self.gap.validate()?;
        self.denoiser.validate()?;
        self.schedule.validate()
    }
}

/// Anything that predicts diffusion noise from an observation.
pub trait NoisePredictor {
    /// Conditioning for window `b` of `batch`.
    fn observe(&self, g: &mut Graph, batch: &WindowBatch, b: usize) -> Result<Var, DecisionError>;

    /// Noise estimate for `noisy` actions at step `k`.
    fn predict_noise(&self, g: &mut Graph, noisy: Var, k: usize, obs: Var) -> Result<Var, DecisionError>;
}

/// Fusion network and denoiser sharing one parameter store.
#[derive(Debug, Clone)]
pub struct Policy {
    pub gap: Gap,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub sampler: SamplerConfig,
}

impl Policy {
    /// Registers parameters under `gap/` and `denoiser/`.
    pub fn new(store: &mut ParamStore, cfg: &PolicyConfig, seed: u64) -> Result<Self, DecisionError> {
        cfg.validate()?;
        let dim = crate::codec::GESTURE_DIM;
        let mut rng = seeded(derive_seed(seed, "init"));
        Ok(Self {
            gap: Gap::new(store, "gap", &cfg.gap, &mut rng)?,
            denoiser: Denoiser::new(store, "denoiser", &cfg.denoiser, dim, cfg.gap.obs_dim, &mut rng)?,
            schedule: NoiseSchedule::new(cfg.schedule)?,
            sampler: cfg.sampler,
        })
    }

    /// GAP over the first `N_obs` rows of each stream.
    pub fn observe_streams(&self, g: &mut Graph, gesture: &Tensor, audio: &Tensor, phonemes: &Tensor) -> Result<Var, DecisionError> {
        let n = self.sampler.obs_len;
        if gesture.rows() != n || audio.rows() < n || phonemes.rows() < n {
            return Err(DecisionError::Invalid(format!(
                "observation needs {n} frames, got gesture {}, audio {}, phonemes {}",
                gesture.rows(),
                audio.rows(),
                phonemes.rows()
            )));
        }
        let x = g.constant(gesture.clone());
        let a = g.constant(audio.slice_rows(0, n));
        let p = g.constant(phonemes.slice_rows(0, n));
        Ok(self.gap.forward(g, x, a, p)?.observation)
    }
}

impl NoisePredictor for Policy {
    fn observe(&self, g: &mut Graph, batch: &WindowBatch, b: usize) -> Result<Var, DecisionError> {
        self.observe_streams(g, &batch.gesture_obs[b], &batch.audio_feat[b], &batch.phoneme_feat[b])
    }

    fn predict_noise(&self, g: &mut Graph, noisy: Var, k: usize, obs: Var) -> Result<Var, DecisionError> {
        Ok(self.denoiser.predict_noise(g, noisy, k, obs, &self.schedule)?)
    }
}

/// Knows the clean actions and returns the exact noise.
///
/// Its "observation" is the clean action window itself, looked up by window
/// start; the noise estimate is `(a_k − ᾱ_k·a0)/β̄_k`.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub schedule: NoiseSchedule,
    pub targets: HashMap<usize, Tensor>,
    calls: Cell<usize>,
}

impl OracleDenoiser {
    pub fn new(schedule: NoiseSchedule) -> Self {
        Self { schedule, targets: HashMap::new(), calls: Cell::new(0) }
    }

    /// Uses each window's own action targets as the known clean actions.
    pub fn for_batch(schedule: NoiseSchedule, batch: &WindowBatch) -> Self {
        let mut o = Self::new(schedule);
        for (b, &s) in batch.window_start_indices.iter().enumerate() {
            o.targets.insert(s, batch.action_target[b].clone());
        }
        o
    }

    /// Number of noise predictions made so far.
    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl NoisePredictor for OracleDenoiser {
    fn observe(&self, g: &mut Graph, batch: &WindowBatch, b: usize) -> Result<Var, DecisionError> {
        let s = batch.window_start_indices[b];
        let t = self.targets.get(&s).ok_or_else(|| DecisionError::Invalid(format!("oracle has no window {s}")))?;
        Ok(g.constant(t.clone()))
    }

    fn predict_noise(&self, g: &mut Graph, noisy: Var, k: usize, obs: Var) -> Result<Var, DecisionError> {
        if k == 0 || k > self.schedule.train_steps() {
            return Err(DecisionError::StepOutOfRange { k, max: self.schedule.train_steps() });
        }
        self.calls.set(self.calls.get() + 1);
        let signal = g.scale(obs, self.schedule.signal_mult(k));
        let resid = g.sub(noisy, signal)?;
        Ok(g.scale(resid, 1.0 / self.schedule.noise_mult(k)))
    }
}

/// Runs the reverse process from seeded Gaussian actions of shape `rows × cols`.
pub fn ddim_sample<P: NoisePredictor>(
    model: &P,
    store: &ParamStore,
    obs: &Tensor,
    schedule: &NoiseSchedule,
    seed: u64,
    rows: usize,
    cols: usize,
) -> Result<Tensor, DecisionError> {
    let mut rng = seeded(derive_seed(seed, "ddim"));
    let mut a = Tensor::matrix(rows, cols, standard_normal(&mut rng, rows * cols))?;
    for w in schedule.inference_timesteps().windows(2) {
        let (k, k_prev) = (w[0], w[1]);
        let eps = {
            let mut g = Graph::new(store, Mode::Eval);
            let o = g.constant(obs.clone());
            let x = g.constant(a.clone());
            let e = model.predict_noise(&mut g, x, k, o)?;
            g.value(e).clone()
        };
        let z = if schedule.ddim_sigma(k, k_prev) > 0.0 {
            Some(Tensor::matrix(rows, cols, standard_normal(&mut rng, rows * cols))?)
        } else {
            None
        };
        a = ddim_step(&a, k, k_prev, &eps, schedule, z.as_ref())?;
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckOptions};

    fn randn(rows: usize, cols: usize, seed: u64) -> Tensor {
        Tensor::matrix(rows, cols, standard_normal(&mut seeded(seed), rows * cols)).unwrap()
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn oracle_sampling_recovers_clean_actions() {
        let s = sched();
        let oracle = OracleDenoiser::new(s.clone());
        let store = ParamStore::new();
        let a0 = randn(8, 437, 1).map(|v| 0.1 * v);
        let out = ddim_sample(&oracle, &store, &a0, &s, 3, 8, 437).unwrap();
        assert!(out.max_abs_diff(&a0) <= 1e-8);
        assert_eq!(oracle.calls(), 10);
    }

    #[test]
    fn sampling_is_bitwise_repeatable() {
        let cfg = PolicyConfig { gap: GapConfig::toy(), denoiser: DenoiserConfig::toy(), ..Default::default() };
        let mut store = ParamStore::new();
        let policy = Policy::new(&mut store, &cfg, 4).unwrap();
        let obs = randn(8, cfg.gap.obs_dim, 5);
        let a = ddim_sample(&policy, &store, &obs, &policy.schedule, 6, 8, 437).unwrap();
        let b = ddim_sample(&policy, &store, &obs, &policy.schedule, 6, 8, 437).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
        let c = ddim_sample(&policy, &store, &obs, &policy.schedule, 7, 8, 437).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn denoiser_shape_and_live_conditioning() {
        let cfg = PolicyConfig { gap: GapConfig::toy(), ..Default::default() };
        let mut store = ParamStore::new();
        let policy = Policy::new(&mut store, &cfg, 8).unwrap();
        let noisy = randn(8, 437, 9);
        let obs = randn(8, cfg.gap.obs_dim, 10);
        let eval = |obs: &Tensor| {
            let mut g = Graph::new(&store, Mode::Eval);
            let (x, o) = (g.constant(noisy.clone()), g.constant(obs.clone()));
            let e = policy.predict_noise(&mut g, x, 30, o).unwrap();
            g.value(e).clone()
        };
        let base = eval(&obs);
        assert_eq!(base.shape(), &[8, 437]);
        assert_eq!(base, eval(&obs));
        assert!(eval(&obs.map(|v| v + 0.5)).max_abs_diff(&base) > 1e-9);
    }

    #[test]
    fn denoiser_passes_grad_check() {
        let mut store = ParamStore::new();
        let s = sched();
        let den = Denoiser::new(&mut store, "denoiser", &DenoiserConfig::toy(), 6, 5, &mut seeded(11)).unwrap();
        let (noisy, obs, w) = (randn(4, 6, 12), randn(3, 5, 13), randn(4, 6, 14));
        let report = grad_check(
            &mut store,
            move |g| {
                let (x, o, w) = (g.constant(noisy.clone()), g.constant(obs.clone()), g.constant(w.clone()));
                let e = den.predict_noise(g, x, 17, o, &s)?;
                let p = g.mul(e, w)?;
                Ok(g.sum(p))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() <= 1e-4, "{:?}", report.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)));
    }
}
