//! Three-term training objective.
//!
//! For each window a step `k` and Gaussian noise are drawn from the seed; the
//! noise-prediction error gives `L_diff`. The clean-action estimate implied by
//! the prediction is decoded and accumulated onto the window's last observed
//! frame; squared frame errors give `L_rec` and squared errors of the
//! per-step displacements give `L_vel`. Both are summed over dimensions and
//! averaged over predicted frames, and every term is averaged over windows.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{DecisionError, NoisePredictor, NoiseSchedule};
use crate::codec::ActionCodecConfig;
use crate::environment::WindowBatch;
use crate::numerics::rng::{derive_seed, seeded, splitmix64, standard_normal};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub diff: f64,
    pub rec: f64,
    pub vel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { diff: 10.0, rec: 1.0, vel: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), DecisionError> {
        if [self.diff, self.rec, self.vel].iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(DecisionError::Invalid(format!("loss weights must be non-negative, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub diff: Var,
    pub rec: Var,
    pub vel: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub diff: f64,
    pub rec: f64,
    pub vel: f64,
}

impl LossParts {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            total: g.value(self.total).item(),
            diff: g.value(self.diff).item(),
            rec: g.value(self.rec).item(),
            vel: g.value(self.vel).item(),
        }
    }
}

/// Step `k ∈ [1, K]` and noise for window `b` at optimizer step `step`.
pub fn training_draw(seed: u64, step: u64, b: usize, k_max: usize, rows: usize, cols: usize) -> (usize, Tensor) {
    let s = derive_seed(splitmix64(seed ^ splitmix64(step)) ^ b as u64, "diffusion");
    let mut rng = seeded(s);
    let k = rng.random_range(1..=k_max);
    let noise = Tensor::matrix(rows, cols, standard_normal(&mut rng, rows * cols)).expect("positive dims");
    (k, noise)
}

/// Squared Euclidean norm per row, averaged over rows.
fn mean_row_sq(g: &mut Graph, a: Var, b: Var) -> Result<Var, DecisionError> {
    let cols = g.value(a).cols() as f64;
    let m = g.mse(a, b)?;
    Ok(g.scale(m, cols))
}

#[allow(clippy::too_many_arguments)]
pub fn loss_total<P: NoisePredictor>(
    g: &mut Graph,
    model: &P,
    batch: &WindowBatch,
    schedule: &NoiseSchedule,
    weights: &LossWeights,
    codec: &ActionCodecConfig,
    seed: u64,
    step: u64,
) -> Result<LossParts, DecisionError> {
    weights.validate()?;
    if batch.is_empty() {
        return Err(DecisionError::EmptyDataset);
    }
    let mut sums: Option<(Var, Var, Var)> = None;
    for b in 0..batch.len() {
        let a0 = &batch.action_target[b];
        let (rows, cols) = (a0.rows(), a0.cols());
        let (k, noise) = training_draw(seed, step, b, schedule.train_steps(), rows, cols);
        let (alpha, sigma) = (schedule.signal_mult(k), schedule.noise_mult(k));
        let noisy_t = super::forward_noise(a0, k, &noise, schedule)?;

        let obs = model.observe(g, batch, b)?;
        let noisy = g.constant(noisy_t);
        let eps_hat = model.predict_noise(g, noisy, k, obs)?;
        let noise_v = g.constant(noise);
        let diff = g.mse(eps_hat, noise_v)?;

        // x̂0 = (a_k − β̄_k ε̂)/ᾱ_k
        let scaled = g.scale(eps_hat, sigma);
        let x0 = g.sub(noisy, scaled)?;
        let x0 = g.scale(x0, 1.0 / alpha);
        let disp = g.radial_scale(x0, |r| codec.decode_factor(r));

        let template = batch.template(b).to_vec();
        let future = &batch.gesture_future[b];
        let tmpl = g.constant(Tensor::matrix(1, cols, template.clone())?);
        let path = g.cumsum_rows(disp);
        let frames = g.add(path, tmpl)?;
        let truth = g.constant(future.clone());
        let rec = mean_row_sq(g, frames, truth)?;

        let mut prev = template;
        let mut true_disp = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            true_disp.extend(future.row(r).iter().zip(&prev).map(|(x, p)| x - p));
            prev = future.row(r).to_vec();
        }
        let true_disp = g.constant(Tensor::matrix(rows, cols, true_disp)?);
        let vel = mean_row_sq(g, disp, true_disp)?;

        sums = Some(match sums {
            None => (diff, rec, vel),
            Some((d, r, v)) => (g.add(d, diff)?, g.add(r, rec)?, g.add(v, vel)?),
        });
    }
    let (d, r, v) = sums.expect("non-empty batch");
    let inv = 1.0 / batch.len() as f64;
    let (diff, rec, vel) = (g.scale(d, inv), g.scale(r, inv), g.scale(v, inv));
    let wd = g.scale(diff, weights.diff);
    let wr = g.scale(rec, weights.rec);
    let wv = g.scale(vel, weights.vel);
    let t = g.add(wd, wr)?;
    let total = g.add(t, wv)?;
    Ok(LossParts { total, diff, rec, vel })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decision::{OracleDenoiser, Policy, PolicyConfig, ScheduleConfig};
    use crate::environment::{gen_synthetic_motion, Clip, SamplerConfig, SyntheticSpec};
    use crate::numerics::{Mode, ParamStore};
    use crate::perception::GapConfig;

    fn clip() -> Clip {
        let spec = SyntheticSpec { n_frames: 1024, seed: 2, ..Default::default() };
        let (m, a, p) = gen_synthetic_motion(&spec, &SamplerConfig::default()).unwrap();
        let z = crate::codec::Normalizer::fit(&m).normalize(&m);
        Clip::new(z, a, p, &ActionCodecConfig::default()).unwrap()
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn oracle_drives_every_term_to_zero() {
        let batch = clip().windows(&[0, 17, 90], &SamplerConfig::default()).unwrap();
        let oracle = OracleDenoiser::for_batch(sched(), &batch);
        let store = ParamStore::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let parts = loss_total(&mut g, &oracle, &batch, &sched(), &LossWeights::default(), &ActionCodecConfig::default(), 1, 0).unwrap();
        let v = parts.values(&g);
        assert!(v.diff < 1e-12 && v.rec < 1e-12 && v.vel < 1e-12, "{v:?}");
    }

    #[test]
    fn total_is_the_weighted_sum() {
        let cfg = PolicyConfig { gap: GapConfig::toy(), ..Default::default() };
        let mut store = ParamStore::new();
        let policy = Policy::new(&mut store, &cfg, 3).unwrap();
        let batch = clip().windows(&[5, 40], &SamplerConfig::default()).unwrap();
        let codec = ActionCodecConfig::default();
        let mut g = Graph::new(&store, Mode::Eval);
        let v = loss_total(&mut g, &policy, &batch, &policy.schedule, &LossWeights::default(), &codec, 4, 0).unwrap().values(&g);
        assert!((v.total - (10.0 * v.diff + v.rec + v.vel)).abs() <= 1e-12 * v.total.max(1.0));
        let only = LossWeights { diff: 1.0, rec: 0.0, vel: 0.0 };
        let mut g = Graph::new(&store, Mode::Eval);
        let w = loss_total(&mut g, &policy, &batch, &policy.schedule, &only, &codec, 4, 0).unwrap().values(&g);
        assert_eq!(w.total, w.diff);
        assert_eq!(w.diff, v.diff);
    }

    /// Predicts a fixed noise value regardless of inputs.
    struct Constant(f64);

    impl NoisePredictor for Constant {
        fn observe(&self, g: &mut Graph, _: &WindowBatch, _: usize) -> Result<Var, DecisionError> {
            Ok(g.constant(Tensor::scalar(0.0)))
        }
        fn predict_noise(&self, g: &mut Graph, noisy: Var, _: usize, _: Var) -> Result<Var, DecisionError> {
            let z = g.scale(noisy, 0.0);
            let c = g.constant(Tensor::full(&[1, 1], self.0));
            Ok(g.add(z, c)?)
        }
    }

    #[test]
    fn one_dimensional_case_by_hand() {
        // one window, one observed frame at 0.2, one future frame at 0.5
        let codec = ActionCodecConfig::default();
        let d = 0.3f64;
        let a = d * (-d * d).exp();
        let batch = WindowBatch {
            gesture_obs: vec![Tensor::matrix(1, 1, vec![0.2]).unwrap()],
            action_target: vec![Tensor::matrix(1, 1, vec![a]).unwrap()],
            gesture_future: vec![Tensor::matrix(1, 1, vec![0.5]).unwrap()],
            audio_feat: vec![],
            phoneme_feat: vec![],
            window_start_indices: vec![0],
        };
        let s = sched();
        let c = 0.4;
        let store = ParamStore::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let v = loss_total(&mut g, &Constant(c), &batch, &s, &LossWeights::default(), &codec, 9, 2).unwrap().values(&g);

        let (k, noise) = training_draw(9, 2, 0, 100, 1, 1);
        let z = noise.item();
        let (al, be) = (s.signal_mult(k), s.noise_mult(k));
        let ak = al * a + be * z;
        let x0 = (ak - be * c) / al;
        // invert r = x·e^{−x²} by bisection on [0, cap]
        let target = x0.abs().min(codec.max_action_norm());
        let (mut lo, mut hi) = (0.0f64, codec.max_displacement());
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid * (-mid * mid).exp() < target { lo = mid } else { hi = mid }
        }
        let step = x0.signum() * 0.5 * (lo + hi);
        let l_diff = (c - z).powi(2);
        let l_rec = (0.2 + step - 0.5).powi(2);
        let l_vel = (step - 0.3).powi(2);
        assert!((v.diff - l_diff).abs() < 1e-12);
        assert!((v.rec - l_rec).abs() < 1e-12);
        assert!((v.vel - l_vel).abs() < 1e-12);
        assert!((v.total - (10.0 * l_diff + l_rec + l_vel)).abs() < 1e-11);
    }

    #[test]
    fn draws_are_seeded_and_in_range() {
        let (k, n) = training_draw(1, 2, 3, 100, 4, 5);
        assert_eq!((k, n.clone()), training_draw(1, 2, 3, 100, 4, 5));
        assert!((1..=100).contains(&k));
        let ks: Vec<usize> = (0..2000).map(|b| training_draw(7, 0, b, 100, 1, 1).0).collect();
        assert!(ks.contains(&1) && ks.contains(&100));
    }
}
