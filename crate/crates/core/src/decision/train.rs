//! Deterministic training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{loss_total, DecisionError, LossValues, LossWeights, NoisePredictor, NoiseSchedule};
use crate::codec::ActionCodecConfig;
use crate::environment::{Clip, SamplerConfig};
use crate::numerics::rng::{derive_seed, seeded};
use crate::numerics::{AdamWConfig, AdamWState, Graph, Mode, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Cosine-anneal the learning rate down to this fraction of its start; 1 keeps it constant.
    pub final_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            learning_rate: 1e-5,
            batch_size: 32,
            epochs: 2,
            seed: 0,
            weight_decay: 0.0,
            max_steps: None,
            final_lr_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DecisionError> {
        self.weights.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DecisionError::Invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(DecisionError::Invalid("batch_size and epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(DecisionError::Invalid("final_lr_fraction must lie in [0, 1]".into()));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(DecisionError::Invalid("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// A clip and the window starts used for training.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub clip: Clip,
    pub starts: Vec<usize>,
}

impl Dataset {
    /// Every valid window of the clip.
    pub fn all_windows(clip: Clip, sampler: &SamplerConfig) -> Result<Self, DecisionError> {
        let starts = sampler.window_starts(clip.motion.len())?;
        Ok(Self { clip, starts })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossValues,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossValues,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    /// Per-epoch mean losses as CSV with a header row.
    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,total,diff,rec,vel\n");
        for e in &self.epochs {
            let l = e.loss;
            s.push_str(&format!("{},{},{},{},{}\n", e.epoch, l.total, l.diff, l.rec, l.vel));
        }
        s
    }

    /// Per-step losses as CSV with a header row.
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,epoch,total,diff,rec,vel\n");
        for r in &self.steps {
            let l = r.loss;
            s.push_str(&format!("{},{},{},{},{},{}\n", r.step, r.epoch, l.total, l.diff, l.rec, l.vel));
        }
        s
    }
}

/// Runs AdamW over shuffled mini-batches of the dataset's windows.
///
/// `on_step` sees every step record as it is produced.
#[allow(clippy::too_many_arguments)]
pub fn train<P: NoisePredictor>(
    store: &mut ParamStore,
    model: &P,
    schedule: &NoiseSchedule,
    dataset: &Dataset,
    sampler: &SamplerConfig,
    codec: &ActionCodecConfig,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainReport, DecisionError> {
    cfg.validate()?;
    if dataset.starts.is_empty() {
        return Err(DecisionError::EmptyDataset);
    }
    let adam = AdamWConfig { learning_rate: cfg.learning_rate, weight_decay: cfg.weight_decay, ..Default::default() };
    let mut opt = AdamWState::new(store, adam);
    let dropout_seed = derive_seed(cfg.seed, "dropout");
    let mut report = TrainReport::default();
    let per_epoch = dataset.starts.len().div_ceil(cfg.batch_size);
    let planned = cfg.max_steps.unwrap_or(usize::MAX).min(per_epoch * cfg.epochs).max(1);
    let mut step = 0u64;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order = dataset.starts.clone();
        order.shuffle(&mut seeded(derive_seed(cfg.seed, &format!("epoch{epoch}"))));
        let mut sum = LossValues { total: 0.0, diff: 0.0, rec: 0.0, vel: 0.0 };
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step as usize >= m) {
                break;
            }
            let batch = dataset.clip.windows(chunk, sampler)?;
            let (values, grads) = {
                let mut g = Graph::new(store, Mode::Train { seed: dropout_seed, step });
                let parts = loss_total(&mut g, model, &batch, schedule, &cfg.weights, codec, cfg.seed, step)?;
                let values = parts.values(&g);
                (values, g.backward(parts.total)?)
            };
            if !values.total.is_finite() {
                return Err(DecisionError::NonFinite { step });
            }
            let progress = step as f64 / planned as f64;
            let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            opt.config.learning_rate = cfg.learning_rate * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * cosine);
            store.clear_grads();
            store.accumulate(&grads);
            opt.step(store)?;
            let rec = StepRecord { step, epoch, loss: values };
            on_step(&rec);
            report.steps.push(rec);
            sum.total += values.total;
            sum.diff += values.diff;
            sum.rec += values.rec;
            sum.vel += values.vel;
            batches += 1;
            step += 1;
        }
        if batches > 0 {
            let n = batches as f64;
            let loss = LossValues { total: sum.total / n, diff: sum.diff / n, rec: sum.rec / n, vel: sum.vel / n };
            report.epochs.push(EpochRecord { epoch, loss });
        }
        if cfg.max_steps.is_some_and(|m| step as usize >= m) {
            break 'epochs;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Normalizer;
    use crate::decision::{DenoiserConfig, Policy, PolicyConfig};
    use crate::environment::{gen_synthetic_motion, SyntheticSpec};
    use crate::perception::GapConfig;

    fn setup() -> (PolicyConfig, Dataset) {
        let cfg = PolicyConfig { gap: GapConfig::toy(), denoiser: DenoiserConfig::toy(), ..Default::default() };
        let spec = SyntheticSpec { n_frames: 1024, seed: 5, ..Default::default() };
        let (m, a, p) = gen_synthetic_motion(&spec, &cfg.sampler).unwrap();
        let z = Normalizer::fit(&m).normalize(&m);
        let clip = Clip::new(z, a, p, &cfg.codec).unwrap();
        (cfg, Dataset { clip, starts: vec![0, 8, 16, 24, 32, 40] })
    }

    fn run(tc: &TrainConfig) -> (ParamStore, TrainReport) {
        let (cfg, data) = setup();
        let mut store = ParamStore::new();
        let policy = Policy::new(&mut store, &cfg, 1).unwrap();
        let report = train(&mut store, &policy, &policy.schedule, &data, &cfg.sampler, &cfg.codec, tc, |_| {}).unwrap();
        (store, report)
    }

    #[test]
    fn same_seed_same_curve() {
        let tc = TrainConfig { batch_size: 4, epochs: 2, learning_rate: 1e-3, ..Default::default() };
        let (_, a) = run(&tc);
        let (_, b) = run(&tc);
        assert_eq!(a.steps.len(), 4);
        assert_eq!(a.epochs.len(), 2);
        for (x, y) in a.steps.iter().zip(&b.steps) {
            assert!((x.loss.total - y.loss.total).abs() <= 1e-9 * x.loss.total.abs());
        }
        assert!(a.steps_csv().lines().count() == 5);
    }

    #[test]
    fn max_steps_stops_early() {
        let tc = TrainConfig { batch_size: 2, epochs: 10, max_steps: Some(5), ..Default::default() };
        let (_, r) = run(&tc);
        assert_eq!(r.steps.len(), 5);
    }

    #[test]
    fn reconstruction_terms_alone_reach_the_denoiser() {
        let (cfg, data) = setup();
        let mut store = ParamStore::new();
        let policy = Policy::new(&mut store, &cfg, 1).unwrap();
        let batch = data.clip.windows(&[0, 8], &cfg.sampler).unwrap();
        let weights = LossWeights { diff: 0.0, rec: 1.0, vel: 1.0 };
        let mut g = Graph::new(&store, Mode::Eval);
        let parts = loss_total(&mut g, &policy, &batch, &policy.schedule, &weights, &cfg.codec, 0, 0).unwrap();
        let grads = g.backward(parts.total).unwrap();
        let mut any = false;
        for p in store.iter().filter(|p| p.name.starts_with("denoiser/")) {
            let id = store.id(&p.name).unwrap();
            let gr = grads.get(id).expect("denoiser parameter reached");
            any |= gr.data().iter().any(|v| v.abs() > 0.0);
        }
        assert!(any);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let (cfg, mut data) = setup();
        data.starts.clear();
        let mut store = ParamStore::new();
        let policy = Policy::new(&mut store, &cfg, 1).unwrap();
        let err = train(&mut store, &policy, &policy.schedule, &data, &cfg.sampler, &cfg.codec, &TrainConfig::default(), |_| {});
        assert!(matches!(err, Err(DecisionError::EmptyDataset)));
    }
}
