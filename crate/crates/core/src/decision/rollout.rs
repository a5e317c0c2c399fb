//! Receding-horizon generation.

use super::{ddim_sample, DecisionError, Policy};
use crate::codec::{ActionCodecConfig, MotionSequence};
use crate::numerics::rng::derive_seed;
use crate::numerics::{Graph, Mode, ParamStore, Tensor};

/// Decodes an action, saturating its norm at the largest decodable value.
pub fn decode_clamped(action: &[f64], codec: &ActionCodecConfig) -> Vec<f64> {
    let r = action.iter().map(|v| v * v).sum::<f64>().sqrt();
    let s = codec.decode_factor(r).0;
    action.iter().map(|v| v * s).collect()
}

/// Extends `initial` (`N_obs` frames) to `total_frames`.
///
/// Each round embeds the latest `N_obs` frames with their audio and phoneme
/// rows, samples `N_act` actions, and accumulates them onto the last frame.
/// `audio` and `phonemes` are indexed like the output frames.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    policy: &Policy,
    store: &ParamStore,
    initial: &Tensor,
    audio: &Tensor,
    phonemes: &Tensor,
    codec: &ActionCodecConfig,
    total_frames: usize,
    frame_rate_hz: f64,
    seed: u64,
) -> Result<MotionSequence, DecisionError> {
    let (n_obs, n_act) = (policy.sampler.obs_len, policy.sampler.act_len);
    if initial.rows() != n_obs {
        return Err(DecisionError::Invalid(format!("rollout needs {n_obs} initial frames, got {}", initial.rows())));
    }
    if total_frames < n_obs {
        return Err(DecisionError::Invalid(format!("total_frames {total_frames} below the {n_obs} initial frames")));
    }
    if audio.rows() < total_frames || phonemes.rows() < total_frames {
        return Err(DecisionError::Invalid(format!(
            "feature streams too short: audio {}, phonemes {}, need {total_frames}",
            audio.rows(),
            phonemes.rows()
        )));
    }
    let dim = initial.cols();
    let mut frames: Vec<f64> = initial.data().to_vec();
    let mut len = n_obs;
    let mut round = 0u64;
    while len < total_frames {
        let start = len - n_obs;
        let window = Tensor::matrix(n_obs, dim, frames[start * dim..len * dim].to_vec())?;
        let obs = {
            let mut g = Graph::new(store, Mode::Eval);
            let o = policy.observe_streams(&mut g, &window, &audio.slice_rows(start, len), &phonemes.slice_rows(start, len))?;
            g.value(o).clone()
        };
        let actions = ddim_sample(policy, store, &obs, &policy.schedule, derive_seed(seed, &format!("round{round}")), n_act, dim)?;
        for r in 0..n_act.min(total_frames - len) {
            let step = decode_clamped(actions.row(r), codec);
            let last = frames[(len - 1) * dim..len * dim].to_vec();
            frames.extend(last.iter().zip(&step).map(|(a, b)| a + b));
            len += 1;
        }
        round += 1;
    }
    Ok(MotionSequence::new(Tensor::matrix(total_frames, dim, frames)?, frame_rate_hz)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decision::{DenoiserConfig, PolicyConfig};
    use crate::environment::{gen_synthetic_motion, SyntheticSpec};
    use crate::perception::GapConfig;

    fn setup() -> (PolicyConfig, ParamStore, Policy, MotionSequence, Tensor, Tensor) {
        let cfg = PolicyConfig { gap: GapConfig::toy(), denoiser: DenoiserConfig::toy(), ..Default::default() };
        let mut store = ParamStore::new();
        let policy = Policy::new(&mut store, &cfg, 2).unwrap();
        let spec = SyntheticSpec { n_frames: 40, seed: 3, ..Default::default() };
        let (m, a, p) = gen_synthetic_motion(&spec, &cfg.sampler).unwrap();
        (cfg, store, policy, m, a.features, p.features)
    }

    #[test]
    fn zero_rounds_return_the_initial_frames() {
        let (cfg, store, policy, m, a, p) = setup();
        let init = m.frames().slice_rows(0, 8);
        let out = rollout(&policy, &store, &init, &a, &p, &cfg.codec, 8, 30.0, 1).unwrap();
        assert_eq!(out.frames(), &init);
    }

    #[test]
    fn length_bound_and_repeatability() {
        let (cfg, store, policy, m, a, p) = setup();
        let init = m.frames().slice_rows(0, 8);
        let out = rollout(&policy, &store, &init, &a, &p, &cfg.codec, 29, 30.0, 1).unwrap();
        assert_eq!(out.len(), 29);
        let peak = cfg.codec.peak_displacement();
        for n in 1..out.len() {
            let d: f64 = out.frame(n).iter().zip(out.frame(n - 1)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!(d <= peak);
        }
        let again = rollout(&policy, &store, &init, &a, &p, &cfg.codec, 29, 30.0, 1).unwrap();
        assert_eq!(out, again);
        assert!(rollout(&policy, &store, &init, &a, &p, &cfg.codec, 41, 30.0, 1).is_err());
    }

    #[test]
    fn clamped_decode_saturates() {
        let codec = ActionCodecConfig::default();
        let big = vec![3.0, 4.0];
        let d = decode_clamped(&big, &codec);
        let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
        assert!((n - codec.max_displacement()).abs() < 1e-12);
        assert_eq!(decode_clamped(&[0.0, 0.0], &codec), vec![0.0, 0.0]);
    }
}
