//! Holistic gesture frames and their on-disk form.
//!
//! `GMO1` layout: magic `GMO1`, `u32` frame count, `u32` dimension (437),
//! `f64` frame rate, then row-major `f64` frames, all little-endian.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CodecError;
use crate::numerics::Tensor;

pub const POSE: Range<usize> = 0..330;
pub const EXPRESSION: Range<usize> = 330..430;
pub const FOOT_CONTACT: Range<usize> = 430..434;
pub const TRANSLATION: Range<usize> = 434..437;
pub const GESTURE_DIM: usize = 437;
pub const DEFAULT_FRAME_RATE: f64 = 30.0;

pub const GMO1_MAGIC: &[u8; 4] = b"GMO1";

/// `N × D` gesture frames at a fixed rate; `D` is 437 for holistic data.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    frames: Tensor,
    frame_rate_hz: f64,
}

impl MotionSequence {
    pub fn new(frames: Tensor, frame_rate_hz: f64) -> Result<Self, CodecError> {
        if frames.shape().len() != 2 {
            return Err(CodecError::Invalid(format!("frames must be a matrix, got shape {:?}", frames.shape())));
        }
        if !(frame_rate_hz > 0.0 && frame_rate_hz.is_finite()) {
            return Err(CodecError::Invalid(format!("frame rate {frame_rate_hz} must be positive")));
        }
        if let Some(i) = frames.data().iter().position(|v| !v.is_finite()) {
            return Err(CodecError::Invalid(format!("non-finite value at frame {}", i / frames.cols())));
        }
        Ok(Self { frames, frame_rate_hz })
    }

    pub fn from_rows(rows: &[Vec<f64>], frame_rate_hz: f64) -> Result<Self, CodecError> {
        let t = Tensor::from_rows(rows).map_err(|e| CodecError::Invalid(e.to_string()))?;
        Self::new(t, frame_rate_hz)
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor {
        self.frames
    }

    pub fn frame(&self, n: usize) -> &[f64] {
        self.frames.row(n)
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    /// Step duration `1 / rate`; metadata only.
    pub fn dt(&self) -> f64 {
        1.0 / self.frame_rate_hz
    }

    pub fn slice(&self, range: Range<usize>) -> MotionSequence {
        Self { frames: self.frames.slice_rows(range.start, range.end), frame_rate_hz: self.frame_rate_hz }
    }

    /// Holistic layout check plus foot-contact labels in `[0, 1]`.
    pub fn validate_raw(&self) -> Result<(), CodecError> {
        if self.dim() != GESTURE_DIM {
            return Err(CodecError::Invalid(format!("expected {GESTURE_DIM} dims, got {}", self.dim())));
        }
        for n in 0..self.len() {
            if self.frame(n)[FOOT_CONTACT].iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(CodecError::Invalid(format!("foot contact outside [0, 1] at frame {n}")));
            }
        }
        Ok(())
    }
}

pub fn write_gmo1<W: Write>(mut w: W, seq: &MotionSequence) -> Result<(), CodecError> {
    if seq.dim() != GESTURE_DIM {
        return Err(CodecError::Invalid(format!("GMO1 stores {GESTURE_DIM}-dim frames, got {}", seq.dim())));
    }
    let mut buf = Vec::with_capacity(20 + 8 * seq.frames.len());
    buf.extend_from_slice(GMO1_MAGIC);
    buf.extend_from_slice(&(seq.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(seq.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&seq.frame_rate_hz.to_le_bytes());
    for v in seq.frames.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_gmo1<R: Read>(mut r: R) -> Result<MotionSequence, CodecError> {
    let mut head = [0u8; 20];
    r.read_exact(&mut head)?;
    if &head[..4] != GMO1_MAGIC {
        return Err(CodecError::Format(format!("bad magic {:?}", &head[..4])));
    }
    let n = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
    let rate = f64::from_le_bytes(head[12..20].try_into().expect("8 bytes"));
    if dim != GESTURE_DIM {
        return Err(CodecError::Format(format!("dimension {dim}, expected {GESTURE_DIM}")));
    }
    let mut payload = vec![0u8; 8 * n * dim];
    r.read_exact(&mut payload)?;
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let frames = Tensor::matrix(n, dim, data).map_err(|e| CodecError::Format(e.to_string()))?;
    MotionSequence::new(frames, rate)
}

pub fn save_gmo1(path: &Path, seq: &MotionSequence) -> Result<(), CodecError> {
    write_gmo1(std::io::BufWriter::new(std::fs::File::create(path)?), seq)
}

pub fn load_gmo1(path: &Path) -> Result<MotionSequence, CodecError> {
    read_gmo1(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// One frame per line, comma separated, no header.
pub fn write_csv<W: Write>(mut w: W, seq: &MotionSequence) -> Result<(), CodecError> {
    for n in 0..seq.len() {
        let line: Vec<String> = seq.frame(n).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

/// Per-dimension z-score statistics of a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Dimensions with (near) zero spread get unit scale.
    pub fn fit(seq: &MotionSequence) -> Self {
        let (n, d) = (seq.len(), seq.dim());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            mean.iter_mut().zip(seq.frame(i)).for_each(|(m, v)| *m += v / n as f64);
        }
        let mut var = vec![0.0; d];
        for i in 0..n {
            for (j, v) in seq.frame(i).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2) / n as f64;
            }
        }
        let std = var.into_iter().map(|v| if v.sqrt() > 1e-8 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn normalize(&self, seq: &MotionSequence) -> MotionSequence {
        self.map(seq, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, seq: &MotionSequence) -> MotionSequence {
        self.map(seq, |v, m, s| v * s + m)
    }

    fn map(&self, seq: &MotionSequence, f: impl Fn(f64, f64, f64) -> f64) -> MotionSequence {
        let d = seq.dim();
        let data = seq.frames.data().iter().enumerate().map(|(i, &v)| f(v, self.mean[i % d], self.std[i % d])).collect();
        MotionSequence {
            frames: Tensor::matrix(seq.len(), d, data).expect("same shape"),
            frame_rate_hz: seq.frame_rate_hz,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize) -> MotionSequence {
        let data = (0..n * GESTURE_DIM).map(|i| ((i * 7919) % 101) as f64 / 101.0).collect();
        MotionSequence::new(Tensor::matrix(n, GESTURE_DIM, data).unwrap(), 30.0).unwrap()
    }

    #[test]
    fn gmo1_round_trip_and_header() {
        let seq = sample(5);
        let mut buf = Vec::new();
        write_gmo1(&mut buf, &seq).unwrap();
        assert_eq!(&buf[..4], b"GMO1");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 437);
        assert_eq!(f64::from_le_bytes(buf[12..20].try_into().unwrap()), 30.0);
        assert_eq!(buf.len(), 20 + 5 * 437 * 8);
        assert_eq!(read_gmo1(buf.as_slice()).unwrap(), seq);
    }

    #[test]
    fn gmo1_rejects_other_dims() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"GMO1");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&3u32.to_le_bytes());
        buf.extend_from_slice(&30f64.to_le_bytes());
        buf.extend_from_slice(&[0u8; 24]);
        assert!(matches!(read_gmo1(buf.as_slice()), Err(CodecError::Format(_))));
    }

    #[test]
    fn non_finite_frames_are_rejected() {
        let t = Tensor::matrix(1, 2, vec![0.0, f64::NAN]).unwrap();
        assert!(MotionSequence::new(t, 30.0).is_err());
    }

    #[test]
    fn normalizer_inverts() {
        let seq = sample(9);
        let norm = Normalizer::fit(&seq);
        let back = norm.denormalize(&norm.normalize(&seq));
        assert!(back.frames().max_abs_diff(seq.frames()) < 1e-12);
    }

    #[test]
    fn csv_has_one_line_per_frame() {
        let mut out = Vec::new();
        write_csv(&mut out, &sample(3)).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().all(|l| l.split(',').count() == GESTURE_DIM));
    }
}
