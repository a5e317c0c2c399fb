//! Training data: synchronized window sampling, synthetic clips, and
//! deterministic stand-ins for the pretrained audio and phoneme encoders.
//!
//! Window indexing: a window starting at `s` covers frames `s+1 ..= s+H`.
//! The first `N_obs` of them are observed; the action targets are the
//! transitions into the remaining `N_act` frames, i.e. action rows
//! `s+N_obs .. s+H`. The last valid start is therefore `N − H − 1`.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::motion::{FOOT_CONTACT, GESTURE_DIM};
use crate::codec::{encode_actions, ActionCodecConfig, ActionSequence, CodecError, MotionSequence};
use crate::numerics::rng::{derive_seed, seeded, standard_normal};
use crate::numerics::Tensor;

pub const AUDIO_DIM: usize = 1024;
pub const PHONEME_DIM: usize = 768;
pub const PHONEME_ALPHABET: usize = 40;
pub const GFT1_MAGIC: &[u8; 4] = b"GFT1";

/// Number of sinusoidal time channels fed to the audio stub.
const AUDIO_TIME_CHANNELS: usize = 8;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("sequence has {frames} frames; a horizon of {horizon} needs at least {}", horizon + 1)]
    TooShort { frames: usize, horizon: usize },
    #[error("requested {requested} windows but only {available} are available")]
    Exhausted { requested: usize, available: usize },
    #[error("invalid environment input: {0}")]
    Invalid(String),
    #[error("feature file: {0}")]
    Format(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub horizon: usize,
    pub obs_len: usize,
    pub act_len: usize,
    pub stride: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { horizon: 16, obs_len: 8, act_len: 8, stride: 1 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.obs_len == 0 || self.act_len == 0 || self.stride == 0 {
            return Err(EnvError::Invalid("obs_len, act_len and stride must be positive".into()));
        }
        if self.obs_len + self.act_len != self.horizon {
            return Err(EnvError::Invalid(format!(
                "obs_len {} + act_len {} must equal horizon {}",
                self.obs_len, self.act_len, self.horizon
            )));
        }
        Ok(())
    }

    /// Valid window starts for a clip of `n_frames`, honoring the stride.
    pub fn window_starts(&self, n_frames: usize) -> Result<Vec<usize>, EnvError> {
        if n_frames < self.horizon + 1 {
            return Err(EnvError::TooShort { frames: n_frames, horizon: self.horizon });
        }
        Ok((0..n_frames - self.horizon).step_by(self.stride).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureSeq {
    pub features: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhonemeFeatureSeq {
    pub features: Tensor,
    pub phoneme_ids: Vec<usize>,
}

impl PhonemeFeatureSeq {
    pub fn new(features: Tensor, phoneme_ids: Vec<usize>) -> Result<Self, EnvError> {
        if features.rows() != phoneme_ids.len() {
            return Err(EnvError::Invalid(format!(
                "{} feature rows for {} phoneme ids",
                features.rows(),
                phoneme_ids.len()
            )));
        }
        Ok(Self { features, phoneme_ids })
    }
}

/// One motion clip with its actions and frame-aligned speech features.
#[derive(Debug, Clone)]
pub struct Clip {
    pub motion: MotionSequence,
    pub actions: ActionSequence,
    pub audio: AudioFeatureSeq,
    pub phonemes: PhonemeFeatureSeq,
}

impl Clip {
    pub fn new(
        motion: MotionSequence,
        audio: AudioFeatureSeq,
        phonemes: PhonemeFeatureSeq,
        codec: &ActionCodecConfig,
    ) -> Result<Self, EnvError> {
        let actions = encode_actions(&motion, codec)?;
        let clip = Self { motion, actions, audio, phonemes };
        clip.check_lengths()?;
        Ok(clip)
    }

    fn check_lengths(&self) -> Result<(), EnvError> {
        let n = self.motion.len();
        if self.actions.len() + 1 != n || self.audio.features.rows() != n || self.phonemes.features.rows() != n {
            return Err(EnvError::Invalid(format!(
                "stream lengths disagree: motion {n}, actions {}, audio {}, phonemes {}",
                self.actions.len(),
                self.audio.features.rows(),
                self.phonemes.features.rows()
            )));
        }
        Ok(())
    }

    /// Cuts the windows starting at `starts`, in that order.
    pub fn windows(&self, starts: &[usize], cfg: &SamplerConfig) -> Result<WindowBatch, EnvError> {
        cfg.validate()?;
        self.check_lengths()?;
        let valid = cfg.window_starts(self.motion.len())?;
        let last = *valid.last().expect("at least one start");
        let mut batch = WindowBatch::default();
        for &s in starts {
            if s > last {
                return Err(EnvError::Invalid(format!("window start {s} beyond last valid start {last}")));
            }
            let obs = s + 1..s + 1 + cfg.obs_len;
            let future = obs.end..s + 1 + cfg.horizon;
            let frames = s + 1..s + 1 + cfg.horizon;
            batch.gesture_obs.push(self.motion.frames().slice_rows(obs.start, obs.end));
            batch.gesture_future.push(self.motion.frames().slice_rows(future.start, future.end));
            let acts = self.actions.slice(future.start - 1..future.end - 1);
            batch.action_target.push(acts.to_tensor().expect("act_len is positive"));
            batch.audio_feat.push(self.audio.features.slice_rows(frames.start, frames.end));
            batch.phoneme_feat.push(self.phonemes.features.slice_rows(frames.start, frames.end));
            batch.window_start_indices.push(s);
        }
        Ok(batch)
    }
}

/// Per-window tensors; entry `b` of every field belongs to window `b`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WindowBatch {
    /// `N_obs × D` observed frames.
    pub gesture_obs: Vec<Tensor>,
    /// `N_act × D` actions leading into the future frames.
    pub action_target: Vec<Tensor>,
    /// `N_act × D` ground-truth future frames.
    pub gesture_future: Vec<Tensor>,
    /// `H × 1024`.
    pub audio_feat: Vec<Tensor>,
    /// `H × 768`.
    pub phoneme_feat: Vec<Tensor>,
    pub window_start_indices: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.window_start_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window_start_indices.is_empty()
    }

    /// Last observed frame of window `b`.
    pub fn template(&self, b: usize) -> &[f64] {
        let obs = &self.gesture_obs[b];
        obs.row(obs.rows() - 1)
    }
}

/// Draws `batch_size` distinct window starts uniformly and cuts them.
pub fn sample_windows(
    motion: &MotionSequence,
    actions: &ActionSequence,
    audio: &AudioFeatureSeq,
    phonemes: &PhonemeFeatureSeq,
    cfg: &SamplerConfig,
    seed: u64,
    batch_size: usize,
) -> Result<WindowBatch, EnvError> {
    let clip = Clip { motion: motion.clone(), actions: actions.clone(), audio: audio.clone(), phonemes: phonemes.clone() };
    let starts = draw_starts(motion.len(), cfg, seed, batch_size)?;
    clip.windows(&starts, cfg)
}

pub fn draw_starts(n_frames: usize, cfg: &SamplerConfig, seed: u64, batch_size: usize) -> Result<Vec<usize>, EnvError> {
    cfg.validate()?;
    let valid = cfg.window_starts(n_frames)?;
    if batch_size > valid.len() {
        return Err(EnvError::Exhausted { requested: batch_size, available: valid.len() });
    }
    let mut rng = seeded(derive_seed(seed, "windows"));
    Ok(index::sample(&mut rng, valid.len(), batch_size).into_iter().map(|i| valid[i]).collect())
}

/// Every valid start once, in a seeded order.
pub fn epoch_order(n_frames: usize, cfg: &SamplerConfig, seed: u64) -> Result<Vec<usize>, EnvError> {
    let available = cfg.window_starts(n_frames)?.len();
    draw_starts(n_frames, cfg, seed, available)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_frames: usize,
    pub seed: u64,
    pub n_modes: usize,
    pub frame_rate_hz: f64,
    /// Upper bound on any raw frame-to-frame displacement norm.
    pub max_step_norm: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { n_frames: 1024, seed: 0, n_modes: 4, frame_rate_hz: 30.0, max_step_norm: 0.3 }
    }
}

/// Smooth positive "speech energy" curve in roughly `[0.2, 1]`.
fn envelope(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(derive_seed(seed, "envelope"));
    let tau = std::f64::consts::TAU;
    let (p1, p2) = (rng.random_range(400.0..800.0), rng.random_range(150.0..300.0));
    let (f1, f2) = (rng.random_range(0.0..tau), rng.random_range(0.0..tau));
    (0..n)
        .map(|t| {
            let t = t as f64;
            0.6 + 0.25 * (tau * t / p1 + f1).sin() + 0.15 * (tau * t / p2 + f2).sin()
        })
        .collect()
}

/// Seeded clip of slow sinusoids whose amplitudes follow a speech envelope.
pub fn gen_synthetic_motion(
    spec: &SyntheticSpec,
    sampler: &SamplerConfig,
) -> Result<(MotionSequence, AudioFeatureSeq, PhonemeFeatureSeq), EnvError> {
    if spec.n_frames < sampler.horizon + 1 {
        return Err(EnvError::TooShort { frames: spec.n_frames, horizon: sampler.horizon });
    }
    if spec.max_step_norm.is_nan() || spec.max_step_norm <= 0.0 {
        return Err(EnvError::Invalid("max_step_norm must be positive".into()));
    }
    let n = spec.n_frames;
    let env = envelope(n, spec.seed);
    let mut rng = seeded(derive_seed(spec.seed, "motion"));
    let tau = std::f64::consts::TAU;

    let mut base = standard_normal(&mut rng, GESTURE_DIM);
    let omegas: Vec<f64> = (0..spec.n_modes).map(|_| rng.random_range(0.003..0.012)).collect();
    let mut amps: Vec<Vec<f64>> = (0..GESTURE_DIM).map(|_| standard_normal(&mut rng, spec.n_modes)).collect();
    let phases: Vec<Vec<f64>> =
        (0..GESTURE_DIM).map(|_| (0..spec.n_modes).map(|_| rng.random_range(0.0..tau)).collect()).collect();
    let scale = 1.0 / (spec.n_modes.max(1) as f64).sqrt();
    amps.iter_mut().flatten().for_each(|a| *a *= scale);
    for j in FOOT_CONTACT {
        base[j] = 0.5;
        let l1: f64 = amps[j].iter().map(|a| a.abs()).sum();
        if l1 > 0.0 {
            amps[j].iter_mut().for_each(|a| *a *= 0.45 / l1);
        }
    }

    let mut osc = vec![0.0; n * GESTURE_DIM];
    for t in 0..n {
        for j in 0..GESTURE_DIM {
            let s: f64 =
                (0..spec.n_modes).map(|m| amps[j][m] * (omegas[m] * t as f64 + phases[j][m]).sin()).sum();
            osc[t * GESTURE_DIM + j] = env[t] * s;
        }
    }
    let max_step = (1..n)
        .map(|t| {
            (0..GESTURE_DIM)
                .map(|j| (osc[t * GESTURE_DIM + j] - osc[(t - 1) * GESTURE_DIM + j]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max);
    let shrink = if max_step > spec.max_step_norm { spec.max_step_norm / max_step } else { 1.0 };
    let data = osc.iter().enumerate().map(|(i, v)| base[i % GESTURE_DIM] + shrink * v).collect();
    let motion = MotionSequence::new(Tensor::matrix(n, GESTURE_DIM, data).expect("positive dims"), spec.frame_rate_hz)?;

    let audio = stub_audio_features(&env, derive_seed(spec.seed, "audio"))?;
    let ids = synthetic_phoneme_ids(n, spec.seed);
    let phonemes = stub_phoneme_features(&ids, derive_seed(spec.seed, "phonemes"))?;
    Ok((motion, audio, phonemes))
}

/// Ids cycle through the alphabet, each held for 3 to 8 frames.
fn synthetic_phoneme_ids(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeded(derive_seed(seed, "phoneme-ids"));
    let mut id = rng.random_range(0..PHONEME_ALPHABET);
    let mut ids = Vec::with_capacity(n);
    while ids.len() < n {
        let dwell = rng.random_range(3..=8);
        ids.extend(std::iter::repeat_n(id, dwell.min(n - ids.len())));
        id = (id + 1) % PHONEME_ALPHABET;
    }
    ids
}

fn projection(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let scale = 1.0 / (rows as f64).sqrt();
    standard_normal(&mut seeded(seed), rows * cols).into_iter().map(|v| v * scale).collect()
}

/// Per-frame inputs to the audio projection: envelope, its first difference, time encodings.
fn audio_inputs(envelope: &[f64]) -> Vec<Vec<f64>> {
    envelope
        .iter()
        .enumerate()
        .map(|(t, &e)| {
            let prev = if t == 0 { e } else { envelope[t - 1] };
            let mut x = vec![e, e - prev];
            for c in 0..AUDIO_TIME_CHANNELS / 2 {
                let w = 1.0 / 4f64.powi(c as i32 + 1);
                x.push((w * t as f64).sin());
                x.push((w * t as f64).cos());
            }
            x
        })
        .collect()
}

pub fn stub_audio_features(envelope: &[f64], seed: u64) -> Result<AudioFeatureSeq, EnvError> {
    if envelope.is_empty() || envelope.iter().any(|v| !v.is_finite()) {
        return Err(EnvError::Invalid("envelope must be non-empty and finite".into()));
    }
    let inputs = audio_inputs(envelope);
    let k = inputs[0].len();
    let p = projection(k, AUDIO_DIM, seed);
    let mut out = vec![0.0; envelope.len() * AUDIO_DIM];
    for (t, x) in inputs.iter().enumerate() {
        let row = &mut out[t * AUDIO_DIM..(t + 1) * AUDIO_DIM];
        for (i, xi) in x.iter().enumerate() {
            row.iter_mut().zip(&p[i * AUDIO_DIM..(i + 1) * AUDIO_DIM]).for_each(|(o, w)| *o += xi * w);
        }
    }
    Ok(AudioFeatureSeq { features: Tensor::matrix(envelope.len(), AUDIO_DIM, out).expect("positive dims") })
}

/// Looks up a seeded 768-dim embedding per phoneme id.
pub fn stub_phoneme_features(ids: &[usize], seed: u64) -> Result<PhonemeFeatureSeq, EnvError> {
    if ids.is_empty() {
        return Err(EnvError::Invalid("no phoneme ids".into()));
    }
    let table = standard_normal(&mut seeded(seed), PHONEME_ALPHABET * PHONEME_DIM);
    let mut out = Vec::with_capacity(ids.len() * PHONEME_DIM);
    for &id in ids {
        if id >= PHONEME_ALPHABET {
            return Err(EnvError::Invalid(format!("phoneme id {id} outside alphabet of {PHONEME_ALPHABET}")));
        }
        out.extend_from_slice(&table[id * PHONEME_DIM..(id + 1) * PHONEME_DIM]);
    }
    PhonemeFeatureSeq::new(Tensor::matrix(ids.len(), PHONEME_DIM, out).expect("positive dims"), ids.to_vec())
}

/// Frame `n` at time `n / frame_rate` takes the nearest token; ties go to the earlier one.
pub fn align_phonemes_to_frames(
    token_ids: &[usize],
    token_times: &[f64],
    frame_rate: f64,
    n_frames: usize,
) -> Result<Vec<usize>, EnvError> {
    if token_ids.is_empty() {
        return Err(EnvError::Invalid("empty token list".into()));
    }
    if token_ids.len() != token_times.len() {
        return Err(EnvError::Invalid("token ids and times differ in length".into()));
    }
    if token_times.windows(2).any(|w| w[1] < w[0]) {
        return Err(EnvError::Invalid("token times must be nondecreasing".into()));
    }
    if frame_rate.is_nan() || frame_rate <= 0.0 {
        return Err(EnvError::Invalid("frame rate must be positive".into()));
    }
    let mut k = 0;
    Ok((0..n_frames)
        .map(|n| {
            let t = n as f64 / frame_rate;
            while k + 1 < token_times.len() && (token_times[k + 1] - t).abs() < (token_times[k] - t).abs() {
                k += 1;
            }
            token_ids[k]
        })
        .collect())
}

pub fn write_gft1<W: Write>(mut w: W, features: &Tensor) -> Result<(), EnvError> {
    let mut buf = Vec::with_capacity(12 + 8 * features.len());
    buf.extend_from_slice(GFT1_MAGIC);
    buf.extend_from_slice(&(features.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(features.cols() as u32).to_le_bytes());
    for v in features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_gft1<R: Read>(mut r: R) -> Result<Tensor, EnvError> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head)?;
    if &head[..4] != GFT1_MAGIC {
        return Err(EnvError::Format(format!("bad magic {:?}", &head[..4])));
    }
    let n = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
    let mut payload = vec![0u8; 8 * n * dim];
    r.read_exact(&mut payload)?;
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Tensor::matrix(n, dim, data).map_err(|e| EnvError::Format(e.to_string()))
}

pub fn save_gft1(path: &Path, features: &Tensor) -> Result<(), EnvError> {
    write_gft1(std::io::BufWriter::new(std::fs::File::create(path)?), features)
}

pub fn load_gft1(path: &Path) -> Result<Tensor, EnvError> {
    read_gft1(std::io::BufReader::new(std::fs::File::open(path)?))
}
