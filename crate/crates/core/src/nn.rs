//! Layers shared by the fusion network and the denoiser.
//!
//! Each layer registers its parameters in a [`ParamStore`] under a name prefix
//! at build time and only keeps the resulting ids.

use crate::numerics::rng::Rng;
use crate::numerics::{Graph, NumericsError, ParamId, ParamStore, Tensor, Var, LAYER_NORM_EPS};

type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        let weight = store.init_weight(format!("{name}/weight"), &[fan_in, fan_out], fan_in, rng)?;
        let bias = Some(store.init_const(format!("{name}/bias"), &[1, fan_out], 0.0)?);
        Ok(Self { weight, bias, fan_in, fan_out })
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        let weight = store.init_weight(format!("{name}/weight"), &[fan_in, fan_out], fan_in, rng)?;
        Ok(Self { weight, bias: None, fan_in, fan_out })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut Rng) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(store, &format!("{name}/{i}"), d[0], d[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x)?;
            if i < last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.init_const(format!("{name}/gamma"), &[dim], 1.0)?,
            beta: store.init_const(format!("{name}/beta"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// "Same"-padded temporal convolution.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize, rng: &mut Rng) -> Result<Self> {
        let weight = store.init_weight(format!("{name}/weight"), &[kernel, c_in, c_out], kernel * c_in, rng)?;
        let bias = store.init_const(format!("{name}/bias"), &[c_out], 0.0)?;
        Ok(Self { weight, bias, kernel })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv1d(x, w, Some(b), self.kernel)
    }
}

/// Multi-head attention with input and output projections.
///
/// The key projection has no bias: a key bias shifts every score in a row by
/// the same amount and has an identically zero gradient.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(NumericsError::Shape { op: "attention", detail: format!("dim {dim} not divisible by {heads} heads") });
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}/query"), dim, dim, rng)?,
            key: Linear::without_bias(store, &format!("{name}/key"), dim, dim, rng)?,
            value: Linear::new(store, &format!("{name}/value"), dim, dim, rng)?,
            out: Linear::new(store, &format!("{name}/out"), dim, dim, rng)?,
            heads,
        })
    }

    /// Returns the projected output and the raw attention node (for weight inspection).
    pub fn forward(&self, g: &mut Graph, queries: Var, context: Var) -> Result<(Var, Var)> {
        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, context)?;
        let v = self.value.forward(g, context)?;
        let a = g.attention(q, k, v, self.heads)?;
        Ok((self.out.forward(g, a)?, a))
    }
}

/// Feature-wise scale and shift applied after a normalization.
#[derive(Debug, Clone, Copy)]
pub struct Modulation {
    pub scale: Var,
    pub shift: Var,
}

impl Modulation {
    /// `x ⊙ (1 + scale) + shift`.
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.mul(x, self.scale)?;
        let y = g.add(x, s)?;
        g.add(y, self.shift)
    }
}

/// Pre-norm transformer block: attention then a ReLU feed-forward, each residual.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub name: String,
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: Mlp,
    pub dropout: f64,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        heads: usize,
        dropout: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            norm_attn: LayerNorm::new(store, &format!("{name}/norm_attn"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}/attn"), dim, heads, rng)?,
            norm_ff: LayerNorm::new(store, &format!("{name}/norm_ff"), dim)?,
            ff: Mlp::new(store, &format!("{name}/ff"), &[dim, hidden, dim], rng)?,
            dropout,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.forward_modulated(g, x, None)
    }

    pub fn forward_modulated(&self, g: &mut Graph, x: Var, film: Option<Modulation>) -> Result<Var> {
        let mut h = self.norm_attn.forward(g, x)?;
        if let Some(m) = film {
            h = m.apply(g, h)?;
        }
        let (a, _) = self.attn.forward(g, h, h)?;
        let a = g.dropout(a, self.dropout, &format!("{}/attn", self.name))?;
        let x = g.add(x, a)?;
        let mut h = self.norm_ff.forward(g, x)?;
        if let Some(m) = film {
            h = m.apply(g, h)?;
        }
        let f = self.ff.forward(g, h)?;
        let f = g.dropout(f, self.dropout, &format!("{}/ff", self.name))?;
        g.add(x, f)
    }
}

/// Standard sinusoidal table, `len × dim`, base 10000.
pub fn sinusoidal_table(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for t in 0..len {
        for i in 0..dim {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let angle = t as f64 * freq;
            data[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(len, dim, data).expect("positive dims")
}

/// Sinusoidal embedding of a single (possibly fractional) position.
pub fn sinusoidal_embedding(position: f64, dim: usize) -> Tensor {
    let data = (0..dim)
        .map(|i| {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let angle = position * freq;
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect();
    Tensor::matrix(1, dim, data).expect("positive dim")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::seeded;
    use crate::numerics::Mode;

    #[test]
    fn zero_input_zero_bias_block_returns_its_residual() {
        let mut store = ParamStore::new();
        let mut rng = seeded(1);
        let block = TransformerBlock::new(&mut store, "b", 8, 16, 2, 0.1, &mut rng).unwrap();
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.constant(Tensor::zeros(&[4, 8]));
        let y = block.forward(&mut g, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn positional_table_starts_at_sin0_cos0() {
        let t = sinusoidal_table(3, 4);
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((t.get2(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert_eq!(sinusoidal_embedding(1.0, 4).row(0), t.row(1));
    }
}
