//! Variance-preserving noise schedule and the DDIM update.
//!
//! The reverse step `a_{k'} = α(a_k − γ ε̂) + σ z` is realized through the
//! clean-action estimate `x̂0 = (a_k − β̄_k ε̂)/ᾱ_k`:
//!
//! `a_{k'} = ᾱ_{k'} x̂0 + sqrt(β̄²_{k'} − σ²) ε̂ + σ z`,
//!
//! which gives `α = ᾱ_{k'}/ᾱ_k` and `γ = β̄_k − ᾱ_k sqrt(β̄²_{k'} − σ²)/ᾱ_{k'}`.

use serde::{Deserialize, Serialize};

use super::DecisionError;
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    /// Number of training diffusion steps `K`.
    pub train_steps: usize,
    pub inference_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Stochasticity of the reverse process; 0 is deterministic DDIM.
    pub eta: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { train_steps: 100, inference_steps: 10, beta_start: 1e-4, beta_end: 2e-2, eta: 0.0 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), DecisionError> {
        let bad = |m: String| Err(DecisionError::Invalid(m));
        if self.train_steps == 0 {
            return bad("train_steps must be positive".into());
        }
        if self.inference_steps == 0 || self.inference_steps > self.train_steps {
            return bad(format!("inference_steps {} must lie in 1..={}", self.inference_steps, self.train_steps));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return bad(format!("need 0 < beta_start <= beta_end < 1, got {} and {}", self.beta_start, self.beta_end));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be non-negative, got {}", self.eta));
        }
        Ok(())
    }
}

/// Coefficients of one reverse step `k → k_prev`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DdimCoefficients {
    pub k: usize,
    pub k_prev: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub config: ScheduleConfig,
    /// `ᾱ_k` for `k = 0..=K`, with `ᾱ_0 = 1`.
    signal: Vec<f64>,
    /// `β̄_k = sqrt(1 − ᾱ_k²)`, with `β̄_0 = 0`.
    noise: Vec<f64>,
    timesteps: Vec<usize>,
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self, DecisionError> {
        config.validate()?;
        let k_max = config.train_steps;
        let mut signal = vec![1.0];
        let mut prod = 1.0;
        for i in 0..k_max {
            let t = if k_max == 1 { 0.0 } else { i as f64 / (k_max - 1) as f64 };
            let beta = config.beta_start + t * (config.beta_end - config.beta_start);
            prod *= 1.0 - beta;
            signal.push(prod.sqrt());
        }
        let noise = signal.iter().map(|a| (1.0 - a * a).sqrt()).collect();
        let n = config.inference_steps;
        let mut timesteps: Vec<usize> = (1..=n).rev().map(|i| (i * k_max + n / 2) / n).collect();
        timesteps.dedup();
        timesteps.push(0);
        Ok(Self { config, signal, noise, timesteps })
    }

    pub fn train_steps(&self) -> usize {
        self.config.train_steps
    }

    pub fn signal_mult(&self, k: usize) -> f64 {
        self.signal[k]
    }

    pub fn noise_mult(&self, k: usize) -> f64 {
        self.noise[k]
    }

    /// `ᾱ_1 ..= ᾱ_K`.
    pub fn signal_mults(&self) -> &[f64] {
        &self.signal[1..]
    }

    /// `β̄_1 ..= β̄_K`.
    pub fn noise_mults(&self) -> &[f64] {
        &self.noise[1..]
    }

    /// Descending visit order of the sampler, ending at 0.
    pub fn inference_timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn ddim_sigma(&self, k: usize, k_prev: usize) -> f64 {
        let (a, ap) = (self.signal[k], self.signal[k_prev]);
        let (b, bp) = (self.noise[k], self.noise[k_prev]);
        if self.config.eta == 0.0 || b == 0.0 {
            return 0.0;
        }
        self.config.eta * ((bp * bp) / (b * b) * (1.0 - (a * a) / (ap * ap))).max(0.0).sqrt()
    }

    pub fn coefficients(&self, k: usize, k_prev: usize) -> DdimCoefficients {
        let sigma = self.ddim_sigma(k, k_prev);
        let (a, ap) = (self.signal[k], self.signal[k_prev]);
        let c = (self.noise[k_prev].powi(2) - sigma * sigma).max(0.0).sqrt();
        DdimCoefficients { k, k_prev, alpha: ap / a, gamma: self.noise[k] - a * c / ap, sigma }
    }

    /// Coefficients for every step of the inference sub-schedule.
    pub fn inference_coefficients(&self) -> Vec<DdimCoefficients> {
        self.timesteps.windows(2).map(|w| self.coefficients(w[0], w[1])).collect()
    }

    fn check_step(&self, k: usize) -> Result<(), DecisionError> {
        if k == 0 || k > self.config.train_steps {
            return Err(DecisionError::StepOutOfRange { k, max: self.config.train_steps });
        }
        Ok(())
    }
}

/// `a_k = ᾱ_k·a0 + β̄_k·noise`.
pub fn forward_noise(a0: &Tensor, k: usize, noise: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor, DecisionError> {
    schedule.check_step(k)?;
    if a0.shape() != noise.shape() {
        return Err(DecisionError::Invalid(format!("noise shape {:?} differs from {:?}", noise.shape(), a0.shape())));
    }
    let (a, b) = (schedule.signal_mult(k), schedule.noise_mult(k));
    let data = a0.data().iter().zip(noise.data()).map(|(x, e)| a * x + b * e).collect();
    Ok(Tensor::new(a0.shape().to_vec(), data)?)
}

/// One reverse step from `k` to `k_prev`; `noise` is required when `σ > 0`.
pub fn ddim_step(
    a_k: &Tensor,
    k: usize,
    k_prev: usize,
    eps_hat: &Tensor,
    schedule: &NoiseSchedule,
    noise: Option<&Tensor>,
) -> Result<Tensor, DecisionError> {
    schedule.check_step(k)?;
    if k_prev >= k {
        return Err(DecisionError::Invalid(format!("reverse step needs k_prev < k, got {k} -> {k_prev}")));
    }
    if a_k.shape() != eps_hat.shape() {
        return Err(DecisionError::Invalid("noise estimate shape differs from the actions".into()));
    }
    let sigma = schedule.ddim_sigma(k, k_prev);
    let z = match noise {
        Some(z) if z.shape() == a_k.shape() => Some(z),
        Some(_) => return Err(DecisionError::Invalid("noise shape differs from the actions".into())),
        None if sigma > 0.0 => return Err(DecisionError::MissingNoise { sigma }),
        None => None,
    };
    let (a, b) = (schedule.signal_mult(k), schedule.noise_mult(k));
    let ap = schedule.signal_mult(k_prev);
    let c = (schedule.noise_mult(k_prev).powi(2) - sigma * sigma).max(0.0).sqrt();
    let data = a_k
        .data()
        .iter()
        .zip(eps_hat.data())
        .enumerate()
        .map(|(i, (x, e))| {
            let x0 = (x - b * e) / a;
            let stoch = z.map_or(0.0, |z| sigma * z.data()[i]);
            ap * x0 + c * e + stoch
        })
        .collect();
    Ok(Tensor::new(a_k.shape().to_vec(), data)?)
}
