//! Self-checks shared by the command line, the acceptance suite and the
//! Python bindings: finite-difference gradient checks of the learned modules
//! and a codec round trip over a motion file.

use serde::{Deserialize, Serialize};

use crate::codec::motion::GESTURE_DIM;
use crate::codec::{encode_actions, reconstruct, ActionCodecConfig, CodecError, GestureTemplate, MotionSequence};
use crate::decision::{Denoiser, DenoiserConfig, NoiseSchedule};
use crate::environment::{AUDIO_DIM, PHONEME_DIM};
use crate::numerics::rng::{derive_seed, seeded, standard_normal};
use crate::numerics::{grad_check, Graph, GradCheckOptions, GradCheckReport, NumericsError, ParamStore, Tensor, Var};
use crate::perception::{Gap, GapConfig};

type Result<T> = std::result::Result<T, NumericsError>;

fn randn(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::matrix(rows, cols, standard_normal(&mut seeded(seed), rows * cols)).expect("positive dims")
}

/// `Σ x ⊙ R` for a fixed random `R`, so every output entry reaches the loss.
fn probe(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let (r, c) = (g.value(x).rows(), g.value(x).cols());
    let w = g.constant(randn(r, c, seed));
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

/// Gradient check of the full fusion module on random `frames`-row inputs.
pub fn gap_grad_check(cfg: &GapConfig, frames: usize, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let gap = Gap::new(&mut store, "gap", cfg, &mut seeded(derive_seed(seed, "gap")))?;
    let gesture = randn(frames, GESTURE_DIM, derive_seed(seed, "gesture"));
    let audio = randn(frames, AUDIO_DIM, derive_seed(seed, "audio"));
    let phonemes = randn(frames, PHONEME_DIM, derive_seed(seed, "phonemes"));
    let probe_seed = derive_seed(seed, "probe");
    grad_check(
        &mut store,
        |g| {
            let (x, a, p) = (g.constant(gesture.clone()), g.constant(audio.clone()), g.constant(phonemes.clone()));
            let out = gap.forward(g, x, a, p)?;
            probe(g, out.observation, probe_seed)
        },
        opts,
    )
}

/// Gradient check of the denoiser's noise estimate at diffusion step `k`.
#[allow(clippy::too_many_arguments)]
pub fn denoiser_grad_check(
    cfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    rows: usize,
    action_dim: usize,
    obs_dim: usize,
    k: usize,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let den = Denoiser::new(&mut store, "denoiser", cfg, action_dim, obs_dim, &mut seeded(derive_seed(seed, "denoiser")))?;
    let noisy = randn(rows, action_dim, derive_seed(seed, "noisy")).map(|v| v * 0.05);
    let obs = randn(rows, obs_dim, derive_seed(seed, "obs"));
    let probe_seed = derive_seed(seed, "probe");
    grad_check(
        &mut store,
        |g| {
            let (x, o) = (g.constant(noisy.clone()), g.constant(obs.clone()));
            let e = den.predict_noise(g, x, k, o, schedule)?;
            probe(g, e, probe_seed)
        },
        opts,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTripReport {
    pub frames: usize,
    pub max_abs_error: f64,
    pub tolerance: f64,
    /// Frames whose reconstruction misses by more than `tolerance`.
    pub failures: Vec<usize>,
    /// Set when encoding itself fails, e.g. on an over-cap displacement.
    pub error: Option<String>,
}

impl RoundTripReport {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.failures.is_empty()
    }
}

/// Encodes `seq`, reconstructs it from its first frame and compares.
pub fn codec_round_trip(seq: &MotionSequence, cfg: &ActionCodecConfig, tolerance: f64) -> RoundTripReport {
    let mut report =
        RoundTripReport { frames: seq.len(), max_abs_error: 0.0, tolerance, failures: Vec::new(), error: None };
    let result = (|| -> std::result::Result<MotionSequence, CodecError> {
        let actions = encode_actions(seq, cfg)?;
        let template = GestureTemplate::new(seq.frame(0).to_vec(), "first frame")?;
        reconstruct(&template, &actions, cfg, seq.frame_rate_hz())
    })();
    match result {
        Ok(back) => {
            for n in 0..seq.len() {
                let err = back.frame(n).iter().zip(seq.frame(n)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                report.max_abs_error = report.max_abs_error.max(err);
                if err > tolerance {
                    report.failures.push(n);
                }
            }
        }
        Err(e) => report.error = Some(e.to_string()),
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decision::ScheduleConfig;

    #[test]
    fn sampled_checks_pass_at_toy_widths() {
        let opts = GradCheckOptions { max_entries_per_param: Some(4), ..Default::default() };
        let gap = gap_grad_check(&GapConfig::toy(), 4, 1, &opts).unwrap();
        assert!(gap.max_rel_error() <= 1e-4, "{}", gap.max_rel_error());
        let den = denoiser_grad_check(&DenoiserConfig::toy(), &NoiseSchedule::new(ScheduleConfig::default()).unwrap(), 4, 6, 5, 37, 2, &opts).unwrap();
        assert!(den.max_rel_error() <= 1e-4, "{}", den.max_rel_error());
    }

    #[test]
    fn round_trip_reports_over_cap_frames() {
        let ok = MotionSequence::from_rows(&[vec![0.0; 3], vec![0.1, 0.0, 0.0], vec![0.1, 0.2, 0.0]], 30.0).unwrap();
        let r = codec_round_trip(&ok, &ActionCodecConfig::default(), 1e-8);
        assert!(r.passed() && r.max_abs_error <= 1e-12);

        let bad = MotionSequence::from_rows(&[vec![0.0; 3], vec![0.0; 3], vec![2.0, 0.0, 0.0]], 30.0).unwrap();
        let r = codec_round_trip(&bad, &ActionCodecConfig::default(), 1e-8);
        assert!(!r.passed());
        assert!(r.error.unwrap().contains("frame 1"));
    }
}
