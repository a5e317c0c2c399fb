//! Gesture–audio–phoneme fusion.
//!
//! Gesture parts, audio and phonemes are encoded separately. A learned gate
//! blends audio and phoneme features into one speech stream. Speech then
//! attends over the summed gesture streams, and two transformer blocks plus
//! an MLP head produce the observation embedding.

use serde::{Deserialize, Serialize};

use crate::codec::motion::{EXPRESSION, GESTURE_DIM, POSE, TRANSLATION};
use crate::environment::{AUDIO_DIM, PHONEME_DIM};
use crate::nn::{sinusoidal_table, Conv1d, LayerNorm, Linear, Mlp, MultiHeadAttention, TransformerBlock};
use crate::numerics::rng::Rng;
use crate::numerics::{Graph, Mode, NumericsError, ParamStore, Tensor, Var};

type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GapConfig {
    pub latent_dim: usize,
    pub mlp_hidden: usize,
    pub heads: usize,
    pub dropout: f64,
    pub obs_dim: usize,
    pub rhythm_kernels: [usize; 2],
    pub phoneme_kernels: [usize; 2],
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            latent_dim: 256,
            mlp_hidden: 512,
            heads: 8,
            dropout: 0.1,
            obs_dim: 1024,
            rhythm_kernels: [5, 3],
            phoneme_kernels: [3, 5],
        }
    }
}

impl GapConfig {
    /// Small widths for gradient checks and quick tests.
    pub fn toy() -> Self {
        Self { latent_dim: 16, mlp_hidden: 32, heads: 2, dropout: 0.0, obs_dim: 64, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.mlp_hidden == 0 || self.obs_dim == 0 {
            return Err(NumericsError::Contract("GAP widths must be positive".into()));
        }
        if self.heads == 0 || !self.latent_dim.is_multiple_of(self.heads) {
            return Err(NumericsError::Contract(format!(
                "latent_dim {} not divisible by {} heads",
                self.latent_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NumericsError::Contract(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.rhythm_kernels.iter().chain(&self.phoneme_kernels).any(|k| k % 2 == 0) {
            return Err(NumericsError::Contract("convolution kernels must be odd".into()));
        }
        Ok(())
    }
}

/// Fused observation, `N_obs × obs_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationEmbedding {
    pub values: Tensor,
}

/// Two-layer MLP followed by a transformer block.
#[derive(Debug, Clone)]
pub struct ModalityEncoder {
    pub mlp: Mlp,
    pub block: TransformerBlock,
}

impl ModalityEncoder {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, cfg: &GapConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, &format!("{name}/mlp"), &[input, cfg.mlp_hidden, cfg.latent_dim], rng)?,
            block: TransformerBlock::new(store, &format!("{name}/block"), cfg.latent_dim, cfg.mlp_hidden, cfg.heads, cfg.dropout, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.mlp.forward(g, x)?;
        self.block.forward(g, h)
    }
}

/// Content (MLP) and rhythm (convolution) pathways mixed per frame.
#[derive(Debug, Clone)]
pub struct AudioEncoder {
    pub content: Mlp,
    pub rhythm: [Conv1d; 2],
    pub scorer: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct AudioOutput {
    pub features: Var,
    pub content: Var,
    pub rhythm: Var,
    /// `N × 2` mixing weights, content first.
    pub weights: Var,
}

impl AudioEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &GapConfig, rng: &mut Rng) -> Result<Self> {
        let l = cfg.latent_dim;
        let [k1, k2] = cfg.rhythm_kernels;
        Ok(Self {
            content: Mlp::new(store, &format!("{name}/content"), &[AUDIO_DIM, cfg.mlp_hidden, l], rng)?,
            rhythm: [
                Conv1d::new(store, &format!("{name}/rhythm0"), AUDIO_DIM, l, k1, rng)?,
                Conv1d::new(store, &format!("{name}/rhythm1"), l, l, k2, rng)?,
            ],
            scorer: Linear::new(store, &format!("{name}/scorer"), 2 * l, 2, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, audio: Var) -> Result<AudioOutput> {
        let content = self.content.forward(g, audio)?;
        let r = self.rhythm[0].forward(g, audio)?;
        let r = g.relu(r);
        let rhythm = self.rhythm[1].forward(g, r)?;
        let both = g.concat_cols(&[content, rhythm])?;
        let logits = self.scorer.forward(g, both)?;
        let weights = g.softmax(logits);
        let wc = g.slice_cols(weights, 0, 1)?;
        let wr = g.slice_cols(weights, 1, 2)?;
        let c = g.mul(content, wc)?;
        let r = g.mul(rhythm, wr)?;
        let features = g.add(c, r)?;
        Ok(AudioOutput { features, content, rhythm, weights })
    }
}

/// Projection, two convolutions, then a transformer block.
#[derive(Debug, Clone)]
pub struct PhonemeEncoder {
    pub proj: Linear,
    pub conv: [Conv1d; 2],
    pub block: TransformerBlock,
}

impl PhonemeEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &GapConfig, rng: &mut Rng) -> Result<Self> {
        let l = cfg.latent_dim;
        let [k1, k2] = cfg.phoneme_kernels;
        Ok(Self {
            proj: Linear::new(store, &format!("{name}/proj"), PHONEME_DIM, l, rng)?,
            conv: [
                Conv1d::new(store, &format!("{name}/conv0"), l, l, k1, rng)?,
                Conv1d::new(store, &format!("{name}/conv1"), l, l, k2, rng)?,
            ],
            block: TransformerBlock::new(store, &format!("{name}/block"), l, cfg.mlp_hidden, cfg.heads, cfg.dropout, rng)?,
        })
    }

    /// Output of the convolution stack, before the transformer block.
    pub fn temporal_features(&self, g: &mut Graph, phonemes: Var) -> Result<Var> {
        let h = self.proj.forward(g, phonemes)?;
        let h = g.relu(h);
        let h = self.conv[0].forward(g, h)?;
        let h = g.relu(h);
        self.conv[1].forward(g, h)
    }

    pub fn forward(&self, g: &mut Graph, phonemes: Var) -> Result<Var> {
        let h = self.temporal_features(g, phonemes)?;
        self.block.forward(g, h)
    }
}

/// `speech = α ⊙ audio' + (1 − α) ⊙ phoneme'` with a sigmoid-gated α.
#[derive(Debug, Clone)]
pub struct SpeechGate {
    pub audio_proj: Linear,
    pub phoneme_proj: Linear,
    pub gate: Mlp,
}

#[derive(Debug, Clone, Copy)]
pub struct GateOutput {
    pub speech: Var,
    pub alpha: Var,
    pub audio_proj: Var,
    pub phoneme_proj: Var,
}

impl SpeechGate {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &GapConfig, rng: &mut Rng) -> Result<Self> {
        let l = cfg.latent_dim;
        Ok(Self {
            audio_proj: Linear::new(store, &format!("{name}/audio_proj"), l, l, rng)?,
            phoneme_proj: Linear::new(store, &format!("{name}/phoneme_proj"), l, l, rng)?,
            gate: Mlp::new(store, &format!("{name}/gate"), &[2 * l, cfg.mlp_hidden, l], rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, audio: Var, phonemes: Var) -> Result<GateOutput> {
        let a = self.audio_proj.forward(g, audio)?;
        let m = self.phoneme_proj.forward(g, phonemes)?;
        let both = g.concat_cols(&[a, m])?;
        let logits = self.gate.forward(g, both)?;
        let alpha = g.sigmoid(logits);
        // α⊙a + (1−α)⊙m = m + α⊙(a − m)
        let diff = g.sub(a, m)?;
        let mix = g.mul(alpha, diff)?;
        let speech = g.add(m, mix)?;
        Ok(GateOutput { speech, alpha, audio_proj: a, phoneme_proj: m })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GapOutput {
    pub observation: Var,
    /// Speech stream after the cross-attention residual, before the blocks.
    pub fused: Var,
    /// Speech stream with positional encoding, the residual input.
    pub speech: Var,
    pub cross_attention: Var,
    pub audio: AudioOutput,
    pub gate: GateOutput,
}

#[derive(Debug, Clone)]
pub struct Gap {
    pub cfg: GapConfig,
    pub pose: ModalityEncoder,
    pub expression: ModalityEncoder,
    pub translation: ModalityEncoder,
    pub audio: AudioEncoder,
    pub phonemes: PhonemeEncoder,
    pub gate: SpeechGate,
    pub norm_query: LayerNorm,
    pub norm_context: LayerNorm,
    pub cross: MultiHeadAttention,
    pub blocks: [TransformerBlock; 2],
    pub head: Mlp,
}

impl Gap {
    /// Registers all parameters under `{prefix}/…`.
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &GapConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let l = cfg.latent_dim;
        let block = |store: &mut ParamStore, i: usize, rng: &mut Rng| {
            TransformerBlock::new(store, &format!("{prefix}/fusion{i}"), l, cfg.mlp_hidden, cfg.heads, cfg.dropout, rng)
        };
        Ok(Self {
            cfg: cfg.clone(),
            pose: ModalityEncoder::new(store, &format!("{prefix}/pose"), POSE.len(), cfg, rng)?,
            expression: ModalityEncoder::new(store, &format!("{prefix}/expression"), EXPRESSION.len(), cfg, rng)?,
            translation: ModalityEncoder::new(store, &format!("{prefix}/translation"), TRANSLATION.len(), cfg, rng)?,
            audio: AudioEncoder::new(store, &format!("{prefix}/audio"), cfg, rng)?,
            phonemes: PhonemeEncoder::new(store, &format!("{prefix}/phonemes"), cfg, rng)?,
            gate: SpeechGate::new(store, &format!("{prefix}/gate"), cfg, rng)?,
            norm_query: LayerNorm::new(store, &format!("{prefix}/cross/norm_query"), l)?,
            norm_context: LayerNorm::new(store, &format!("{prefix}/cross/norm_context"), l)?,
            cross: MultiHeadAttention::new(store, &format!("{prefix}/cross/attn"), l, cfg.heads, rng)?,
            blocks: [block(store, 0, rng)?, block(store, 1, rng)?],
            head: Mlp::new(store, &format!("{prefix}/head"), &[l, cfg.mlp_hidden, cfg.mlp_hidden, cfg.obs_dim], rng)?,
        })
    }

    /// The three gesture streams for `N × 437` frames.
    pub fn encode_gesture_components(&self, g: &mut Graph, gesture: Var) -> Result<[Var; 3]> {
        let cols = g.value(gesture).cols();
        if cols != GESTURE_DIM {
            return Err(NumericsError::Shape { op: "gap", detail: format!("gesture has {cols} dims, expected {GESTURE_DIM}") });
        }
        let pose = g.slice_cols(gesture, POSE.start, POSE.end)?;
        let expression = g.slice_cols(gesture, EXPRESSION.start, EXPRESSION.end)?;
        let translation = g.slice_cols(gesture, TRANSLATION.start, TRANSLATION.end)?;
        Ok([
            self.pose.forward(g, pose)?,
            self.expression.forward(g, expression)?,
            self.translation.forward(g, translation)?,
        ])
    }

    /// `gesture`, `audio` and `phonemes` must share their row count.
    pub fn forward(&self, g: &mut Graph, gesture: Var, audio: Var, phonemes: Var) -> Result<GapOutput> {
        let n = g.value(gesture).rows();
        for (what, v, dim) in [("audio", audio, AUDIO_DIM), ("phoneme", phonemes, PHONEME_DIM)] {
            let t = g.value(v);
            if t.rows() != n || t.cols() != dim {
                return Err(NumericsError::Shape {
                    op: "gap",
                    detail: format!("{what} features {}x{}, expected {n}x{dim}", t.rows(), t.cols()),
                });
            }
        }
        let [p, e, t] = self.encode_gesture_components(g, gesture)?;
        let motion = g.add(p, e)?;
        let motion = g.add(motion, t)?;
        let audio = self.audio.forward(g, audio)?;
        let phon = self.phonemes.forward(g, phonemes)?;
        let gate = self.gate.forward(g, audio.features, phon)?;

        let pe = g.constant(sinusoidal_table(n, self.cfg.latent_dim));
        let motion = g.add(motion, pe)?;
        let speech = g.add(gate.speech, pe)?;
        let q = self.norm_query.forward(g, speech)?;
        let kv = self.norm_context.forward(g, motion)?;
        let (attended, cross_attention) = self.cross.forward(g, q, kv)?;
        let attended = g.dropout(attended, self.cfg.dropout, "gap/cross")?;
        let fused = g.add(attended, speech)?;

        let mut h = fused;
        for b in &self.blocks {
            h = b.forward(g, h)?;
        }
        let observation = self.head.forward(g, h)?;
        Ok(GapOutput { observation, fused, speech, cross_attention, audio, gate })
    }

    /// Eval-mode embedding of one observation window.
    pub fn embed(&self, store: &ParamStore, gesture: &Tensor, audio: &Tensor, phonemes: &Tensor) -> Result<ObservationEmbedding> {
        let mut g = Graph::new(store, Mode::Eval);
        let (x, a, p) = (g.constant(gesture.clone()), g.constant(audio.clone()), g.constant(phonemes.clone()));
        let out = self.forward(&mut g, x, a, p)?;
        Ok(ObservationEmbedding { values: g.value(out.observation).clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{seeded, standard_normal};
    use crate::numerics::{grad_check, GradCheckOptions};
    use proptest::prelude::*;

    fn randn(rows: usize, cols: usize, seed: u64) -> Tensor {
        Tensor::matrix(rows, cols, standard_normal(&mut seeded(seed), rows * cols)).unwrap()
    }

    /// Scalar `Σ x ⊙ R` with a fixed random `R`, so every output entry matters.
    fn probe(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
        let (r, c) = (g.value(x).rows(), g.value(x).cols());
        let w = g.constant(randn(r, c, seed));
        let p = g.mul(x, w)?;
        Ok(g.sum(p))
    }

    fn set(store: &mut ParamStore, name: &str, value: f64) {
        store.by_name_mut(name).unwrap().value.data_mut().iter_mut().for_each(|v| *v = value);
    }

    fn build(cfg: &GapConfig, seed: u64) -> (ParamStore, Gap) {
        let mut store = ParamStore::new();
        let gap = Gap::new(&mut store, "gap", cfg, &mut seeded(seed)).unwrap();
        (store, gap)
    }

    fn inputs(n: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
        (randn(n, GESTURE_DIM, seed), randn(n, AUDIO_DIM, seed + 1), randn(n, PHONEME_DIM, seed + 2))
    }

    #[test]
    fn default_shapes() {
        let (store, gap) = build(&GapConfig::default(), 1);
        let (x, a, p) = inputs(8, 10);
        let mut g = Graph::new(&store, Mode::Eval);
        let (xv, av, pv) = (g.constant(x), g.constant(a), g.constant(p));
        let streams = gap.encode_gesture_components(&mut g, xv).unwrap();
        for s in streams {
            assert_eq!(g.value(s).shape(), &[8, 256]);
        }
        let out = gap.forward(&mut g, xv, av, pv).unwrap();
        assert_eq!(g.value(out.audio.features).shape(), &[8, 256]);
        assert_eq!(g.value(out.gate.speech).shape(), &[8, 256]);
        assert_eq!(g.value(out.observation).shape(), &[8, 1024]);
        assert!(g.value(out.observation).is_finite());
    }

    #[test]
    fn zero_input_zero_bias_encoder_is_zero() {
        let cfg = GapConfig::toy();
        let mut store = ParamStore::new();
        let enc = ModalityEncoder::new(&mut store, "enc", 5, &cfg, &mut seeded(2)).unwrap();
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.constant(Tensor::zeros(&[4, 5]));
        let y = enc.forward(&mut g, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cra_weights_are_a_partition_of_unity() {
        let (store, gap) = build(&GapConfig::toy(), 3);
        let mut g = Graph::new(&store, Mode::Eval);
        let a = g.constant(randn(8, AUDIO_DIM, 4));
        let out = gap.audio.forward(&mut g, a).unwrap();
        let w = g.value(out.weights);
        for r in 0..8 {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn saturated_cra_scorer_selects_content() {
        let (mut store, gap) = build(&GapConfig::toy(), 5);
        set(&mut store, "gap/audio/scorer/weight", 0.0);
        store.by_name_mut("gap/audio/scorer/bias").unwrap().value.data_mut().copy_from_slice(&[1e3, -1e3]);
        let mut g = Graph::new(&store, Mode::Eval);
        let a = g.constant(randn(8, AUDIO_DIM, 6));
        let out = gap.audio.forward(&mut g, a).unwrap();
        assert_eq!(g.value(out.features), g.value(out.content));
    }

    #[test]
    fn phoneme_convolutions_keep_constant_signals_constant() {
        let (store, gap) = build(&GapConfig::toy(), 7);
        let mut g = Graph::new(&store, Mode::Eval);
        let row = standard_normal(&mut seeded(8), PHONEME_DIM);
        let x = g.constant(Tensor::from_rows(&vec![row; 12]).unwrap());
        let h = gap.phonemes.temporal_features(&mut g, x).unwrap();
        let t = g.value(h);
        assert_eq!(t.shape(), &[12, 16]);
        // receptive field reaches 1 + 2 = 3 frames past each side
        for r in 4..8 {
            for c in 0..16 {
                assert!((t.get2(r, c) - t.get2(3, c)).abs() < 1e-12);
            }
        }
        let out = gap.phonemes.forward(&mut g, x).unwrap();
        assert_eq!(g.value(out).shape(), &[12, 16]);
    }

    #[test]
    fn saturated_gate_passes_projected_audio() {
        let (mut store, gap) = build(&GapConfig::toy(), 9);
        set(&mut store, "gap/gate/gate/1/weight", 0.0);
        set(&mut store, "gap/gate/gate/1/bias", 40.0);
        let mut g = Graph::new(&store, Mode::Eval);
        let (a, m) = (g.constant(randn(8, 16, 10)), g.constant(randn(8, 16, 11)));
        let out = gap.gate.forward(&mut g, a, m).unwrap();
        assert!(g.value(out.speech).max_abs_diff(g.value(out.audio_proj)) <= 1e-9);
    }

    #[test]
    fn half_gate_with_equal_projections_is_a_fixed_point() {
        let (mut store, gap) = build(&GapConfig::toy(), 12);
        set(&mut store, "gap/gate/gate/1/weight", 0.0);
        set(&mut store, "gap/gate/gate/1/bias", 0.0);
        for part in ["weight", "bias"] {
            let v = store.by_name(&format!("gap/gate/audio_proj/{part}")).unwrap().value.clone();
            store.by_name_mut(&format!("gap/gate/phoneme_proj/{part}")).unwrap().value = v;
        }
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.constant(randn(8, 16, 13));
        let out = gap.gate.forward(&mut g, x, x).unwrap();
        assert!(g.value(out.alpha).data().iter().all(|&v| v == 0.5));
        assert!(g.value(out.speech).max_abs_diff(g.value(out.audio_proj)) <= 1e-12);
    }

    #[test]
    fn zero_value_projection_leaves_speech() {
        let (mut store, gap) = build(&GapConfig::toy(), 14);
        set(&mut store, "gap/cross/attn/value/weight", 0.0);
        set(&mut store, "gap/cross/attn/value/bias", 0.0);
        let (x, a, p) = inputs(8, 15);
        let mut g = Graph::new(&store, Mode::Eval);
        let (xv, av, pv) = (g.constant(x), g.constant(a), g.constant(p));
        let out = gap.forward(&mut g, xv, av, pv).unwrap();
        assert_eq!(g.value(out.fused), g.value(out.speech));
    }

    #[test]
    fn cross_attention_rows_are_normalized() {
        let (store, gap) = build(&GapConfig::toy(), 16);
        let (x, a, p) = inputs(8, 17);
        let mut g = Graph::new(&store, Mode::Eval);
        let (xv, av, pv) = (g.constant(x), g.constant(a), g.constant(p));
        let out = gap.forward(&mut g, xv, av, pv).unwrap();
        for head in g.attention_weights(out.cross_attention).unwrap() {
            for r in 0..8 {
                assert!((head.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eval_is_deterministic_and_order_sensitive() {
        let (store, gap) = build(&GapConfig::toy(), 18);
        let (x, a, p) = inputs(8, 19);
        let first = gap.embed(&store, &x, &a, &p).unwrap();
        let second = gap.embed(&store, &x, &a, &p).unwrap();
        assert_eq!(first, second);
        let rows: Vec<Vec<f64>> = (0..8).rev().map(|r| x.row(r).to_vec()).collect();
        let permuted = gap.embed(&store, &Tensor::from_rows(&rows).unwrap(), &a, &p).unwrap();
        assert!(permuted.values.max_abs_diff(&first.values) > 1e-9);
    }

    #[test]
    fn rejects_mismatched_lengths() {
        let (store, gap) = build(&GapConfig::toy(), 20);
        let (x, _, p) = inputs(8, 21);
        let a = randn(7, AUDIO_DIM, 22);
        assert!(matches!(gap.embed(&store, &x, &a, &p), Err(NumericsError::Shape { .. })));
        assert!(GapConfig { heads: 3, ..GapConfig::toy() }.validate().is_err());
    }

    #[test]
    fn gesture_encoders_pass_grad_check() {
        let (mut store, gap) = build(&GapConfig::toy(), 23);
        let x = randn(8, GESTURE_DIM, 24);
        let gap2 = gap.clone();
        let report = grad_check(
            &mut store,
            move |g| {
                let xv = g.constant(x.clone());
                let [p, e, t] = gap2.encode_gesture_components(g, xv)?;
                let s = g.concat_cols(&[p, e, t])?;
                probe(g, s, 25)
            },
            &GradCheckOptions { max_entries_per_param: Some(24), ..Default::default() },
        )
        .unwrap();
        assert!(report.max_rel_error() <= 1e-4, "{}", report.max_rel_error());
    }

    #[test]
    fn speech_path_passes_grad_check() {
        let (mut store, gap) = build(&GapConfig::toy(), 26);
        let (a, p) = (randn(8, AUDIO_DIM, 27), randn(8, PHONEME_DIM, 28));
        let gap2 = gap.clone();
        let report = grad_check(
            &mut store,
            move |g| {
                let (av, pv) = (g.constant(a.clone()), g.constant(p.clone()));
                let audio = gap2.audio.forward(g, av)?;
                let phon = gap2.phonemes.forward(g, pv)?;
                let out = gap2.gate.forward(g, audio.features, phon)?;
                probe(g, out.speech, 29)
            },
            &GradCheckOptions { max_entries_per_param: Some(24), ..Default::default() },
        )
        .unwrap();
        assert!(report.max_rel_error() <= 1e-4, "{}", report.max_rel_error());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn gate_output_lies_between_projections(seed in 0u64..1000) {
            let (store, gap) = build(&GapConfig::toy(), seed);
            let mut g = Graph::new(&store, Mode::Eval);
            let (a, m) = (g.constant(randn(4, 16, seed + 1)), g.constant(randn(4, 16, seed + 2)));
            let out = gap.gate.forward(&mut g, a, m).unwrap();
            let (s, pa, pm) = (g.value(out.speech), g.value(out.audio_proj), g.value(out.phoneme_proj));
            for i in 0..s.len() {
                let (lo, hi) = (pa.data()[i].min(pm.data()[i]), pa.data()[i].max(pm.data()[i]));
                prop_assert!(s.data()[i] >= lo - 1e-12 && s.data()[i] <= hi + 1e-12);
            }
            prop_assert!(g.value(out.alpha).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
