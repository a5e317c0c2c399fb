//! Differential gesture actions.
//!
//! A frame-to-frame displacement `D` becomes the action `a = ε·exp(−β‖D‖²)·D`.
//! The norm map `r(d) = ε·d·exp(−βd²)` rises until `d* = 1/sqrt(2β)` and then
//! falls, so decoding is only well defined below `d*`. Encoding therefore
//! rejects displacements above a configurable fraction of `d*`, and decoding
//! inverts `r` on that capped interval with a bracketed Newton iteration.

pub mod motion;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numerics::Tensor;
pub use motion::{MotionSequence, Normalizer, GESTURE_DIM};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("sequence has {0} frames; encoding needs at least 2")]
    TooShort(usize),
    #[error("displacement from frame {frame} to {next} has norm {norm:.6}, above the invertible cap {cap:.6}", next = frame + 1)]
    NonInvertibleMotion { frame: usize, norm: f64, cap: f64 },
    #[error("action norm {norm:.6} exceeds the largest decodable norm {max:.6}")]
    OutOfRange { norm: f64, max: f64 },
    #[error("action {index}: {source}")]
    AtFrame {
        index: usize,
        #[source]
        source: Box<CodecError>,
    },
    #[error("invalid codec input: {0}")]
    Invalid(String),
    #[error("motion file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActionCodecConfig {
    /// Sensitivity decay rate β.
    pub beta: f64,
    /// Base scale ε.
    pub epsilon_scaling: f64,
    /// Largest admissible displacement as a fraction of `d*`.
    pub displacement_cap_fraction: f64,
}

impl Default for ActionCodecConfig {
    fn default() -> Self {
        Self { beta: 1.0, epsilon_scaling: 1.0, displacement_cap_fraction: 0.9 }
    }
}

impl ActionCodecConfig {
    pub fn validate(&self) -> Result<(), CodecError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(CodecError::Invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.epsilon_scaling > 0.0 && self.epsilon_scaling.is_finite()) {
            return Err(CodecError::Invalid(format!("epsilon_scaling must be positive, got {}", self.epsilon_scaling)));
        }
        if !(self.displacement_cap_fraction > 0.0 && self.displacement_cap_fraction < 1.0) {
            return Err(CodecError::Invalid(format!(
                "displacement_cap_fraction must lie in (0, 1), got {}",
                self.displacement_cap_fraction
            )));
        }
        Ok(())
    }

    /// Peak of the norm map, `1/sqrt(2β)`.
    pub fn peak_displacement(&self) -> f64 {
        1.0 / (2.0 * self.beta).sqrt()
    }

    /// Largest displacement norm accepted by [`encode_actions`].
    pub fn max_displacement(&self) -> f64 {
        self.displacement_cap_fraction * self.peak_displacement()
    }

    /// `r(d) = ε·d·exp(−βd²)`.
    pub fn action_norm(&self, d: f64) -> f64 {
        self.epsilon_scaling * d * (-self.beta * d * d).exp()
    }

    fn action_norm_slope(&self, d: f64) -> f64 {
        self.epsilon_scaling * (-self.beta * d * d).exp() * (1.0 - 2.0 * self.beta * d * d)
    }

    /// Largest action norm reachable from an admissible displacement.
    pub fn max_action_norm(&self) -> f64 {
        self.action_norm(self.max_displacement())
    }

    /// Short checksum binding actions to the settings that produced them.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for v in [self.beta, self.epsilon_scaling, self.displacement_cap_fraction] {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Radial factor `s(r) = d(r)/r` and its derivative, with `r` clamped to the decodable range.
    ///
    /// Decoding an action `a` is `s(‖a‖)·a`; this form feeds
    /// [`Graph::radial_scale`](crate::numerics::Graph::radial_scale) for
    /// differentiable reconstruction of predicted actions.
    pub fn decode_factor(&self, r: f64) -> (f64, f64) {
        let eps = self.epsilon_scaling;
        let r_max = self.max_action_norm();
        if r >= r_max {
            let d = self.max_displacement();
            return (d / r, -d / (r * r));
        }
        if r < 1e-6 * eps {
            // d = (r/ε)·exp(βd²) ≈ (r/ε)(1 + βr²/ε²)
            let e3 = eps * eps * eps;
            return (1.0 / eps + self.beta * r * r / e3, 2.0 * self.beta * r / e3);
        }
        let d = invert_scale(r, self).expect("inside the decodable range");
        let dd = 1.0 / self.action_norm_slope(d);
        (d / r, (dd * r - d) / (r * r))
    }
}

/// Actions `a¹..a^{N−1}` as rows, plus the checksum of the codec settings used.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSequence {
    data: Vec<f64>,
    dim: usize,
    pub codec_config_hash: String,
}

impl ActionSequence {
    pub fn from_rows(rows: &[Vec<f64>], dim: usize, cfg: &ActionCodecConfig) -> Result<Self, CodecError> {
        if rows.iter().any(|r| r.len() != dim) {
            return Err(CodecError::Invalid(format!("every action must have {dim} entries")));
        }
        Ok(Self { data: rows.concat(), dim, codec_config_hash: cfg.hash() })
    }

    /// Rows of `t` taken as actions produced under `cfg`.
    pub fn from_tensor(t: &Tensor, cfg: &ActionCodecConfig) -> Self {
        Self { data: t.data().to_vec(), dim: t.cols(), codec_config_hash: cfg.hash() }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn action(&self, n: usize) -> &[f64] {
        &self.data[n * self.dim..(n + 1) * self.dim]
    }

    /// Actions as an `(N−1) × D` matrix; `None` when empty.
    pub fn to_tensor(&self) -> Option<Tensor> {
        (!self.is_empty()).then(|| Tensor::matrix(self.len(), self.dim, self.data.clone()).expect("consistent"))
    }

    /// Copies actions `range` into a new sequence.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            data: self.data[range.start * self.dim..range.end * self.dim].to_vec(),
            dim: self.dim,
            codec_config_hash: self.codec_config_hash.clone(),
        }
    }
}

/// Base gesture onto which decoded displacements are accumulated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GestureTemplate {
    pub template: Vec<f64>,
    pub provenance: String,
}

impl GestureTemplate {
    pub fn new(template: Vec<f64>, provenance: impl Into<String>) -> Result<Self, CodecError> {
        if template.iter().any(|v| !v.is_finite()) {
            return Err(CodecError::Invalid("template has non-finite entries".into()));
        }
        Ok(Self { template, provenance: provenance.into() })
    }

    /// Per-dimension mean over all frames.
    pub fn mean_pose(seq: &MotionSequence) -> Self {
        let n = seq.len() as f64;
        let mut t = vec![0.0; seq.dim()];
        for i in 0..seq.len() {
            t.iter_mut().zip(seq.frame(i)).for_each(|(a, v)| *a += v / n);
        }
        Self { template: t, provenance: "training-set mean pose".into() }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Row `n` is `frames[n+1] − frames[n]`.
pub fn temporal_displacement(seq: &MotionSequence) -> Result<Tensor, CodecError> {
    let n = seq.len();
    if n < 2 {
        return Err(CodecError::TooShort(n));
    }
    let d = seq.dim();
    let mut out = Vec::with_capacity((n - 1) * d);
    for i in 0..n - 1 {
        out.extend(seq.frame(i + 1).iter().zip(seq.frame(i)).map(|(b, a)| b - a));
    }
    Ok(Tensor::matrix(n - 1, d, out).expect("positive dims"))
}

/// `Λ = exp(−β‖D‖²)`.
pub fn adaptive_scale(displacement: &[f64], beta: f64) -> f64 {
    let sq: f64 = displacement.iter().map(|x| x * x).sum();
    (-beta * sq).exp()
}

pub fn encode_actions(seq: &MotionSequence, cfg: &ActionCodecConfig) -> Result<ActionSequence, CodecError> {
    cfg.validate()?;
    let mut disp = temporal_displacement(seq)?;
    let cap = cfg.max_displacement();
    let d = disp.cols();
    for (n, row) in disp.data_mut().chunks_mut(d).enumerate() {
        let r = norm(row);
        if r > cap {
            return Err(CodecError::NonInvertibleMotion { frame: n, norm: r, cap });
        }
        let s = cfg.epsilon_scaling * adaptive_scale(row, cfg.beta);
        row.iter_mut().for_each(|v| *v *= s);
    }
    Ok(ActionSequence::from_tensor(&disp, cfg))
}

/// Displacement norm `d ∈ [0, cap]` with `ε·d·exp(−βd²) = r`.
pub fn invert_scale(r: f64, cfg: &ActionCodecConfig) -> Result<f64, CodecError> {
    let r_max = cfg.max_action_norm();
    if !r.is_finite() || r < 0.0 {
        return Err(CodecError::Invalid(format!("action norm {r} must be finite and non-negative")));
    }
    if r > r_max * (1.0 + 1e-12) {
        return Err(CodecError::OutOfRange { norm: r, max: r_max });
    }
    if r == 0.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0, cfg.max_displacement());
    let mut d = (r / cfg.epsilon_scaling).clamp(lo, hi);
    let tol = 1e-15 * r.max(1.0);
    for _ in 0..200 {
        let f = cfg.action_norm(d) - r;
        if f.abs() <= tol {
            break;
        }
        if f > 0.0 {
            hi = d;
        } else {
            lo = d;
        }
        let newton = d - f / cfg.action_norm_slope(d);
        let next = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (next - d).abs() <= 1e-17 * d.max(1e-300) {
            d = next;
            break;
        }
        d = next;
    }
    Ok(d)
}

/// Displacement `D = a·d(‖a‖)/‖a‖`.
pub fn decode_action(action: &[f64], cfg: &ActionCodecConfig) -> Result<Vec<f64>, CodecError> {
    let r = norm(action);
    if r == 0.0 {
        return Ok(vec![0.0; action.len()]);
    }
    let d = invert_scale(r, cfg)?;
    let s = d / r;
    Ok(action.iter().map(|v| v * s).collect())
}

/// Frame 0 is the template; frame n adds the first n decoded actions.
pub fn reconstruct(
    template: &GestureTemplate,
    actions: &ActionSequence,
    cfg: &ActionCodecConfig,
    frame_rate_hz: f64,
) -> Result<MotionSequence, CodecError> {
    let d = template.template.len();
    if !actions.is_empty() && actions.dim() != d {
        return Err(CodecError::Invalid(format!("template has {d} dims, actions have {}", actions.dim())));
    }
    let mut data = Vec::with_capacity((actions.len() + 1) * d);
    data.extend_from_slice(&template.template);
    let mut current = template.template.clone();
    for n in 0..actions.len() {
        let disp = decode_action(actions.action(n), cfg).map_err(|e| CodecError::AtFrame { index: n, source: Box::new(e) })?;
        current.iter_mut().zip(&disp).for_each(|(c, v)| *c += v);
        data.extend_from_slice(&current);
    }
    MotionSequence::new(Tensor::matrix(actions.len() + 1, d, data).expect("positive dims"), frame_rate_hz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{seeded, standard_normal, Rng};
    use proptest::prelude::*;
    use rand::Rng as _;

    fn cfg() -> ActionCodecConfig {
        ActionCodecConfig::default()
    }

    fn seq(rows: Vec<Vec<f64>>) -> MotionSequence {
        MotionSequence::from_rows(&rows, 30.0).unwrap()
    }

    /// Random walk whose steps stay inside the cap.
    fn random_valid(rng: &mut Rng, n: usize, dim: usize, cfg: &ActionCodecConfig) -> MotionSequence {
        let mut rows = vec![standard_normal(rng, dim)];
        for _ in 1..n {
            let dir = standard_normal(rng, dim);
            let len = norm(&dir);
            let step = rng.random_range(0.0..1.0) * cfg.max_displacement();
            let prev = rows.last().unwrap().clone();
            rows.push(prev.iter().zip(&dir).map(|(p, d)| p + d / len * step).collect());
        }
        seq(rows)
    }

    #[test]
    fn displacement_examples() {
        let constant = seq(vec![vec![1.5; 4]; 3]);
        assert!(temporal_displacement(&constant).unwrap().data().iter().all(|&v| v == 0.0));
        let step = seq(vec![vec![0.0; 4], vec![1.0; 4]]);
        assert_eq!(temporal_displacement(&step).unwrap().data(), &[1.0; 4]);
        let v = [0.25, -1.0, 3.0];
        let ramp = seq((0..5).map(|n| v.iter().map(|x| n as f64 * x).collect()).collect());
        let d = temporal_displacement(&ramp).unwrap();
        for r in 0..4 {
            assert_eq!(d.row(r), &v);
        }
        assert!(matches!(temporal_displacement(&seq(vec![vec![0.0; 2]])), Err(CodecError::TooShort(1))));
    }

    #[test]
    fn adaptive_scale_examples() {
        assert_eq!(adaptive_scale(&[0.0; 5], 1.0), 1.0);
        // high-precision reference: exp(-1) = 0.367879441171442321595...
        assert!((adaptive_scale(&[1.0, 0.0], 1.0) - 0.367_879_441_171_442_3).abs() < 1e-15);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((adaptive_scale(&[1.0, s, s], 0.5) - 0.367_879_441_171_442_3).abs() < 1e-15);
        assert!(adaptive_scale(&[1e-3], 1.0) < 1.0);
    }

    #[test]
    fn encode_examples() {
        let constant = seq(vec![vec![2.0; 3]; 4]);
        let a = encode_actions(&constant, &cfg()).unwrap();
        assert_eq!(a.len(), 3);
        assert!((0..3).all(|n| a.action(n).iter().all(|&v| v == 0.0)));

        let tiny_beta = ActionCodecConfig { beta: 1e-12, epsilon_scaling: 2.5, ..cfg() };
        let walk = seq(vec![vec![0.0, 0.0], vec![3.0, -4.0]]);
        let a = encode_actions(&walk, &tiny_beta).unwrap();
        for (got, d) in a.action(0).iter().zip([3.0, -4.0]) {
            assert!((got - 2.5 * d).abs() <= 1e-9 * (2.5 * d).abs());
        }

        let half = seq(vec![vec![0.0, 0.0], vec![0.3, 0.4]]);
        let a = encode_actions(&half, &cfg()).unwrap();
        // 0.5·exp(−0.25) = 0.389400391535702434...
        assert!((norm(a.action(0)) - 0.389_400_391_535_702_4).abs() < 1e-15);
    }

    #[test]
    fn over_cap_displacement_names_its_frame() {
        let c = cfg();
        let mut rows = vec![vec![0.0; 3]; 6];
        rows[4] = vec![0.0, 0.0, 0.0];
        rows[5] = vec![c.max_displacement() * 1.01, 0.0, 0.0];
        match encode_actions(&seq(rows), &c) {
            Err(CodecError::NonInvertibleMotion { frame, .. }) => assert_eq!(frame, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invert_scale_examples() {
        assert_eq!(invert_scale(0.0, &cfg()).unwrap(), 0.0);
        let r = 0.5 * (-0.25f64).exp();
        assert!((invert_scale(r, &cfg()).unwrap() - 0.5).abs() <= 1e-9);
        let over = cfg().max_action_norm() * 1.001;
        assert!(matches!(invert_scale(over, &cfg()), Err(CodecError::OutOfRange { .. })));
    }

    #[test]
    fn invert_scale_round_trips_random_points() {
        let mut rng = seeded(17);
        let c = ActionCodecConfig { beta: 2.3, epsilon_scaling: 0.7, displacement_cap_fraction: 0.95 };
        for _ in 0..1000 {
            let d = rng.random_range(0.0..=c.max_displacement());
            let r = c.action_norm(d);
            let back = invert_scale(r, &c).unwrap();
            assert!((back - d).abs() <= 1e-9, "{d} -> {back}");
            assert!((c.action_norm(back) - r).abs() <= 1e-12 * r.max(1.0));
        }
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode_action(&[0.0; 4], &cfg()).unwrap(), vec![0.0; 4]);
        let a = [0.1, -0.2, 0.05];
        let d = decode_action(&a, &cfg()).unwrap();
        let ratio = d[0] / a[0];
        assert!(ratio > 0.0);
        assert!(d.iter().zip(&a).all(|(x, y)| (x - ratio * y).abs() < 1e-15));
    }

    #[test]
    fn decode_factor_matches_decode_and_finite_differences() {
        let c = ActionCodecConfig { beta: 1.7, epsilon_scaling: 1.3, displacement_cap_fraction: 0.9 };
        for &r in &[1e-9, 1e-3, 0.1, 0.3, c.max_action_norm() * 0.999, c.max_action_norm() * 1.5] {
            let (s, ds) = c.decode_factor(r);
            if r < c.max_action_norm() {
                let d = decode_action(&[r], &c).unwrap()[0];
                assert!((s * r - d).abs() <= 1e-12, "r={r}");
            }
            let h = 1e-7 * r.max(1e-6);
            let fd = (c.decode_factor(r + h).0 - c.decode_factor(r - h).0) / (2.0 * h);
            assert!((ds - fd).abs() <= 1e-5 * ds.abs().max(1.0), "r={r}: {ds} vs {fd}");
        }
    }

    #[test]
    fn reconstruct_examples() {
        let t = GestureTemplate::new(vec![1.0, 2.0], "test").unwrap();
        let empty = ActionSequence::from_rows(&[], 2, &cfg()).unwrap();
        let out = reconstruct(&t, &empty, &cfg(), 30.0).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.frame(0), &[1.0, 2.0]);

        let a = vec![0.1, -0.05];
        let twice = ActionSequence::from_rows(&[a.clone(), a], 2, &cfg()).unwrap();
        let out = reconstruct(&t, &twice, &cfg(), 30.0).unwrap();
        for j in 0..2 {
            let s1 = out.frame(1)[j] - out.frame(0)[j];
            let s2 = out.frame(2)[j] - out.frame(1)[j];
            assert!((s1 - s2).abs() < 1e-15);
        }
    }

    #[test]
    fn reconstruct_reports_the_failing_action() {
        let t = GestureTemplate::new(vec![0.0], "test").unwrap();
        let acts = ActionSequence::from_rows(&[vec![0.1], vec![5.0]], 1, &cfg()).unwrap();
        match reconstruct(&t, &acts, &cfg(), 30.0) {
            Err(CodecError::AtFrame { index: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn full_round_trip_recovers_sequence() {
        let mut rng = seeded(5);
        for _ in 0..20 {
            let s = random_valid(&mut rng, 40, GESTURE_DIM, &cfg());
            let acts = encode_actions(&s, &cfg()).unwrap();
            let t = GestureTemplate::new(s.frame(0).to_vec(), "first frame").unwrap();
            let back = reconstruct(&t, &acts, &cfg(), 30.0).unwrap();
            assert!(back.frames().max_abs_diff(s.frames()) <= 1e-8);
        }
    }

    #[test]
    fn norm_map_increases_up_to_the_peak() {
        let c = cfg();
        let peak = c.peak_displacement();
        let mut prev = -1.0;
        for i in 0..=10_000 {
            let r = c.action_norm(peak * i as f64 / 10_000.0);
            assert!(r > prev || i == 0);
            prev = r;
        }
    }

    proptest! {
        #[test]
        fn negating_displacements_negates_actions(seed in 0u64..10_000) {
            let mut rng = seeded(seed);
            let s = random_valid(&mut rng, 6, 5, &cfg());
            let neg = MotionSequence::new(s.frames().map(|v| -v), 30.0).unwrap();
            let a = encode_actions(&s, &cfg()).unwrap();
            let b = encode_actions(&neg, &cfg()).unwrap();
            for n in 0..a.len() {
                for (x, y) in a.action(n).iter().zip(b.action(n)) {
                    prop_assert_eq!(*x, -*y);
                }
            }
        }

        #[test]
        fn lambda_stays_in_unit_interval(v in proptest::collection::vec(-3.0f64..3.0, 1..12), beta in 1e-3f64..10.0) {
            let l = adaptive_scale(&v, beta);
            prop_assert!(l > 0.0 && l <= 1.0);
            prop_assert_eq!(l == 1.0, v.iter().all(|&x| x == 0.0) || v.iter().map(|x| x * x).sum::<f64>() * beta < 1e-17);
        }

        #[test]
        fn encode_decode_composition(seed in 0u64..10_000) {
            let mut rng = seeded(seed);
            let s = random_valid(&mut rng, 3, 7, &cfg());
            let disp = temporal_displacement(&s).unwrap();
            let acts = encode_actions(&s, &cfg()).unwrap();
            for n in 0..acts.len() {
                let back = decode_action(acts.action(n), &cfg()).unwrap();
                for (x, y) in back.iter().zip(disp.row(n)) {
                    prop_assert!((x - y).abs() <= 1e-9);
                }
            }
        }
    }
}
