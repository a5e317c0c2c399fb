//! Conditional action denoiser.
//!
//! A pre-norm transformer over the `N_act` action tokens. The diffusion step
//! enters through a sinusoidal embedding and the observation through its
//! time-pooled projection; their sum drives a per-layer scale and shift.
//! The network outputs a clean-action estimate, which [`Denoiser::predict_noise`]
//! converts to the equivalent noise estimate.
//!
//! Inputs and outputs are rescaled with a fixed per-component action scale
//! `σ`: with `v = ᾱ²σ² + β̄²` the estimate is `x̂0 = σ·F(a_k/√v)`, so `F` sees
//! and produces values of order one even though action components are tiny.
//! There is deliberately no skip path from `a_k` to the output: its noise
//! would have to be cancelled through the `model_dim` bottleneck.

use serde::{Deserialize, Serialize};

use crate::nn::{sinusoidal_embedding, sinusoidal_table, LayerNorm, Linear, Mlp, Modulation, TransformerBlock};
use crate::numerics::rng::Rng;
use crate::numerics::{Graph, NumericsError, ParamStore, Var};

use super::NoiseSchedule;

type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub timestep_embed_dim: usize,
    pub ff_hidden: usize,
    pub dropout: f64,
    /// Typical magnitude `σ` of one action component.
    pub action_scale: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { model_dim: 64, layers: 2, heads: 4, timestep_embed_dim: 64, ff_hidden: 128, dropout: 0.0, action_scale: 0.02 }
    }
}

impl DenoiserConfig {
    pub fn toy() -> Self {
        Self { model_dim: 8, layers: 1, heads: 2, timestep_embed_dim: 8, ff_hidden: 16, dropout: 0.0, action_scale: 0.02 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.layers == 0 || self.timestep_embed_dim == 0 || self.ff_hidden == 0 {
            return Err(NumericsError::Contract("denoiser widths and depth must be positive".into()));
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(NumericsError::Contract(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NumericsError::Contract(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.action_scale > 0.0 && self.action_scale.is_finite()) {
            return Err(NumericsError::Contract(format!("action_scale {} must be positive", self.action_scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct FilmLayer {
    scale: Linear,
    shift: Linear,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub action_dim: usize,
    input: Linear,
    time: Mlp,
    cond: Linear,
    film: Vec<FilmLayer>,
    blocks: Vec<TransformerBlock>,
    norm_out: LayerNorm,
    output: Linear,
}

impl Denoiser {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &DenoiserConfig,
        action_dim: usize,
        obs_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let mut film = Vec::with_capacity(cfg.layers);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            film.push(FilmLayer {
                scale: Linear::new(store, &format!("{prefix}/film{i}/scale"), d, d, rng)?,
                shift: Linear::new(store, &format!("{prefix}/film{i}/shift"), d, d, rng)?,
            });
            blocks.push(TransformerBlock::new(store, &format!("{prefix}/block{i}"), d, cfg.ff_hidden, cfg.heads, cfg.dropout, rng)?);
        }
        Ok(Self {
            cfg: *cfg,
            action_dim,
            input: Linear::new(store, &format!("{prefix}/input"), action_dim, d, rng)?,
            time: Mlp::new(store, &format!("{prefix}/time"), &[cfg.timestep_embed_dim, d, d], rng)?,
            cond: Linear::new(store, &format!("{prefix}/cond"), obs_dim, d, rng)?,
            film,
            blocks,
            norm_out: LayerNorm::new(store, &format!("{prefix}/norm_out"), d)?,
            output: Linear::new(store, &format!("{prefix}/output"), d, action_dim, rng)?,
        })
    }

    /// Clean-action estimate for noisy actions `N_act × A` at step `k`.
    pub fn forward_x0(&self, g: &mut Graph, noisy: Var, k: usize, obs: Var, schedule: &NoiseSchedule) -> Result<Var> {
        let (n, a) = (g.value(noisy).rows(), g.value(noisy).cols());
        if a != self.action_dim {
            return Err(NumericsError::Shape { op: "denoiser", detail: format!("actions have {a} dims, expected {}", self.action_dim) });
        }
        let (ab, bb, sd) = (schedule.signal_mult(k), schedule.noise_mult(k), self.cfg.action_scale);
        let v = ab * ab * sd * sd + bb * bb;
        let scaled = g.scale(noisy, 1.0 / v.sqrt());
        let x = self.input.forward(g, scaled)?;
        let pe = g.constant(sinusoidal_table(n, self.cfg.model_dim));
        let mut x = g.add(x, pe)?;

        let t = g.constant(sinusoidal_embedding(k as f64, self.cfg.timestep_embed_dim));
        let t = self.time.forward(g, t)?;
        let pooled = g.mean_rows(obs);
        let o = self.cond.forward(g, pooled)?;
        let c = g.add(t, o)?;

        for (film, block) in self.film.iter().zip(&self.blocks) {
            let m = Modulation { scale: film.scale.forward(g, c)?, shift: film.shift.forward(g, c)? };
            x = block.forward_modulated(g, x, Some(m))?;
        }
        let h = self.norm_out.forward(g, x)?;
        let f = self.output.forward(g, h)?;
        Ok(g.scale(f, sd))
    }

    /// `ε̂ = (a_k − ᾱ_k·x̂0) / β̄_k`.
    pub fn predict_noise(&self, g: &mut Graph, noisy: Var, k: usize, obs: Var, schedule: &NoiseSchedule) -> Result<Var> {
        if k == 0 || k > schedule.train_steps() {
            return Err(NumericsError::Contract(format!("diffusion step {k} outside 1..={}", schedule.train_steps())));
        }
        let x0 = self.forward_x0(g, noisy, k, obs, schedule)?;
        let signal = g.scale(x0, schedule.signal_mult(k));
        let resid = g.sub(noisy, signal)?;
        Ok(g.scale(resid, 1.0 / schedule.noise_mult(k)))
    }
}
