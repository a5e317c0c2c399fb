//! Python module `gespolicy_py`. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use gespolicy::checks;
use gespolicy::codec::motion::{load_gmo1, save_gmo1, DEFAULT_FRAME_RATE};
use gespolicy::codec::{self, ActionCodecConfig, ActionSequence, GestureTemplate, MotionSequence};
use gespolicy::config::RunConfig;
use gespolicy::decision::{NoiseSchedule, ScheduleConfig, TemplateMode, TrainedModel};
use gespolicy::environment::{gen_synthetic_motion, SamplerConfig, SyntheticSpec};
use gespolicy::metrics;
use gespolicy::numerics::Tensor;

type Rows = Vec<Vec<f64>>;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn tensor(rows: &Rows) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(err)
}

fn rows(t: &Tensor) -> Rows {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn motion(frames: &Rows, frame_rate_hz: f64) -> PyResult<MotionSequence> {
    MotionSequence::from_rows(frames, frame_rate_hz).map_err(err)
}

/// Action codec parameters: scaling sharpness, output gain and cap fraction.
#[pyclass(name = "CodecConfig", from_py_object)]
#[derive(Clone, Copy)]
struct PyCodecConfig {
    inner: ActionCodecConfig,
}

#[pymethods]
impl PyCodecConfig {
    #[new]
    #[pyo3(signature = (beta=1.0, epsilon_scaling=1.0, displacement_cap_fraction=0.9))]
    fn new(beta: f64, epsilon_scaling: f64, displacement_cap_fraction: f64) -> PyResult<Self> {
        let inner = ActionCodecConfig { beta, epsilon_scaling, displacement_cap_fraction };
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn max_displacement(&self) -> f64 {
        self.inner.max_displacement()
    }

    #[getter]
    fn peak_displacement(&self) -> f64 {
        self.inner.peak_displacement()
    }

    /// Frame-to-frame actions of `frames` (N rows in, N-1 rows out).
    fn encode(&self, frames: Rows) -> PyResult<Rows> {
        let seq = motion(&frames, DEFAULT_FRAME_RATE)?;
        let acts = codec::encode_actions(&seq, &self.inner).map_err(err)?;
        Ok(acts.to_tensor().map(|t| rows(&t)).unwrap_or_default())
    }

    /// Accumulates decoded `actions` onto `template`.
    fn reconstruct(&self, template: Vec<f64>, actions: Rows) -> PyResult<Rows> {
        let t = GestureTemplate::new(template, "python").map_err(err)?;
        let a = ActionSequence::from_rows(&actions, t.template.len(), &self.inner).map_err(err)?;
        let seq = codec::reconstruct(&t, &a, &self.inner, DEFAULT_FRAME_RATE).map_err(err)?;
        Ok(rows(seq.frames()))
    }

    fn invert_scale(&self, r: f64) -> PyResult<f64> {
        codec::invert_scale(r, &self.inner).map_err(err)
    }
}

/// Synthetic motion clip: returns (frames, audio features, phoneme features).
#[pyfunction]
#[pyo3(signature = (n_frames=1024, seed=0))]
fn synth_motion(n_frames: usize, seed: u64) -> PyResult<(Rows, Rows, Rows)> {
    let spec = SyntheticSpec { n_frames, seed, ..Default::default() };
    let (m, a, p) = gen_synthetic_motion(&spec, &SamplerConfig::default()).map_err(err)?;
    Ok((rows(m.frames()), rows(&a.features), rows(&p.features)))
}

#[pyfunction]
fn read_gmo1(path: PathBuf) -> PyResult<(Rows, f64)> {
    let seq = load_gmo1(&path).map_err(err)?;
    Ok((rows(seq.frames()), seq.frame_rate_hz()))
}

#[pyfunction]
#[pyo3(signature = (path, frames, frame_rate_hz=30.0))]
fn write_gmo1(path: PathBuf, frames: Rows, frame_rate_hz: f64) -> PyResult<()> {
    save_gmo1(&path, &motion(&frames, frame_rate_hz)?).map_err(err)
}

/// Signal and noise multipliers for steps 0..=K.
#[pyfunction]
#[pyo3(signature = (train_steps=100))]
fn schedule_multipliers(train_steps: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let s = NoiseSchedule::new(ScheduleConfig { train_steps, ..Default::default() }).map_err(err)?;
    Ok((s.signal_mults().to_vec(), s.noise_mults().to_vec()))
}

#[pyfunction]
fn fgd(real: Rows, generated: Rows) -> PyResult<f64> {
    metrics::fgd(&tensor(&real)?, &tensor(&generated)?).map_err(err)
}

#[pyfunction]
fn div(clips: Vec<Rows>) -> PyResult<f64> {
    let clips = clips.iter().map(tensor).collect::<PyResult<Vec<_>>>()?;
    metrics::div(&clips).map_err(err)
}

#[pyfunction]
fn mse_face(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    metrics::mse_face(&pred, &truth).map_err(err)
}

#[pyfunction]
fn lvd(pred: Rows, truth: Rows, region: Vec<usize>) -> PyResult<f64> {
    metrics::lvd(&tensor(&pred)?, &tensor(&truth)?, &region).map_err(err)
}

/// Max abs error and pass flag of an encode/reconstruct round trip.
#[pyfunction]
#[pyo3(signature = (frames, tolerance=1e-8))]
fn roundtrip(frames: Rows, tolerance: f64) -> PyResult<(f64, bool)> {
    let r = checks::codec_round_trip(&motion(&frames, DEFAULT_FRAME_RATE)?, &ActionCodecConfig::default(), tolerance);
    Ok((r.max_abs_error, r.passed()))
}

/// Default run configuration as JSON.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_json()
}

/// A trained policy loaded from a checkpoint.
#[pyclass(name = "Model", unsendable)]
struct PyModel {
    inner: TrainedModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: TrainedModel::load(&path).map_err(err)? })
    }

    #[getter]
    fn config_json(&self) -> String {
        serde_json::to_string(&self.inner.config).expect("serializable")
    }

    /// Rolls out `frames` frames. With `reference` the first observed frames seed
    /// generation; without it the stored mean pose does.
    #[pyo3(signature = (audio, phonemes, frames, seed=0, reference=None))]
    fn generate(&self, audio: Rows, phonemes: Rows, frames: usize, seed: u64, reference: Option<Rows>) -> PyResult<Rows> {
        let reference = reference.map(|r| motion(&r, DEFAULT_FRAME_RATE)).transpose()?;
        let mode = if reference.is_some() { TemplateMode::Observed } else { TemplateMode::MeanPose };
        let out = self
            .inner
            .generate(reference.as_ref(), &tensor(&audio)?, &tensor(&phonemes)?, frames, mode, seed)
            .map_err(err)?;
        Ok(rows(out.frames()))
    }
}

#[pymodule]
fn gespolicy_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCodecConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth_motion, m)?)?;
    m.add_function(wrap_pyfunction!(read_gmo1, m)?)?;
    m.add_function(wrap_pyfunction!(write_gmo1, m)?)?;
    m.add_function(wrap_pyfunction!(schedule_multipliers, m)?)?;
    m.add_function(wrap_pyfunction!(fgd, m)?)?;
    m.add_function(wrap_pyfunction!(div, m)?)?;
    m.add_function(wrap_pyfunction!(mse_face, m)?)?;
    m.add_function(wrap_pyfunction!(lvd, m)?)?;
    m.add_function(wrap_pyfunction!(roundtrip, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
