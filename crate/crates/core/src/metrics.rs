//! Evaluation metrics: Fréchet gesture distance, L1 diversity, facial MSE
//! and lip velocity difference.
//!
//! FGD uses a fixed seeded linear projection of flattened pose windows in
//! place of a pretrained motion autoencoder, so its values are only
//! comparable between runs that share the extractor.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::motion::{EXPRESSION, POSE};
use crate::codec::MotionSequence;
use crate::numerics::rng::{seeded, standard_normal};
use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("feature projection is rank deficient ({rank} < {cols})")]
    RankDeficient { rank: usize, cols: usize },
}

type Result<T> = std::result::Result<T, MetricError>;

/// Fixed linear map from flattened pose windows to features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub name: String,
    pub projection: Tensor,
    pub window: usize,
}

impl FeatureExtractor {
    pub fn new(window: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        let d_in = window * POSE.len();
        if window == 0 || feature_dim == 0 || feature_dim > d_in {
            return Err(MetricError::Shape(format!("window {window}, feature_dim {feature_dim}")));
        }
        let scale = 1.0 / (d_in as f64).sqrt();
        let data: Vec<f64> = standard_normal(&mut seeded(seed), d_in * feature_dim).into_iter().map(|v| v * scale).collect();
        let m = DMatrix::from_row_slice(d_in, feature_dim, &data);
        let rank = m.rank(1e-10);
        if rank < feature_dim {
            return Err(MetricError::RankDeficient { rank, cols: feature_dim });
        }
        Ok(Self {
            name: format!("linear-pose-w{window}-d{feature_dim}-s{seed}"),
            projection: Tensor::matrix(d_in, feature_dim, data).expect("positive dims"),
            window,
        })
    }

    /// One feature row per stride-1 window.
    pub fn extract(&self, seq: &MotionSequence) -> Result<Tensor> {
        let n = seq.len();
        if n < self.window {
            return Err(MetricError::TooFewSamples { need: self.window, got: n });
        }
        let d = self.projection.cols();
        let p = self.projection.data();
        let rows = n - self.window + 1;
        let mut out = vec![0.0; rows * d];
        for w in 0..rows {
            let row = &mut out[w * d..(w + 1) * d];
            for t in 0..self.window {
                for (j, x) in seq.frame(w + t)[POSE].iter().enumerate() {
                    let i = t * POSE.len() + j;
                    row.iter_mut().zip(&p[i * d..(i + 1) * d]).for_each(|(o, w)| *o += x * w);
                }
            }
        }
        Ok(Tensor::matrix(rows, d, out).expect("positive dims"))
    }
}

fn moments(x: &Tensor) -> (DVector<f64>, DMatrix<f64>) {
    let (m, d) = (x.rows(), x.cols());
    let mat = DMatrix::from_row_slice(m, d, x.data());
    let mean = mat.row_mean().transpose();
    let centered = DMatrix::from_fn(m, d, |i, j| mat[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (m as f64 - 1.0);
    (mean, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

/// `‖μ_r − μ_g‖² + Tr(Σ_r + Σ_g − 2 (Σ_r^{1/2} Σ_g Σ_r^{1/2})^{1/2})`, clamped at 0.
pub fn fgd(real: &Tensor, generated: &Tensor) -> Result<f64> {
    if real.cols() != generated.cols() {
        return Err(MetricError::Shape(format!("feature dims {} vs {}", real.cols(), generated.cols())));
    }
    let d = real.cols();
    for x in [real, generated] {
        if x.rows() < d + 1 {
            return Err(MetricError::TooFewSamples { need: d + 1, got: x.rows() });
        }
        if !x.is_finite() {
            return Err(MetricError::NonFinite("features"));
        }
    }
    let (mu_r, mut cov_r) = moments(real);
    let (mu_g, mut cov_g) = moments(generated);
    for i in 0..d {
        cov_r[(i, i)] += 1e-10;
        cov_g[(i, i)] += 1e-10;
    }
    let root_r = sqrt_psd(&cov_r);
    let cross = sqrt_psd(&(&root_r * &cov_g * &root_r));
    let mean_term = (&mu_r - &mu_g).norm_squared();
    let value = mean_term + cov_r.trace() + cov_g.trace() - 2.0 * cross.trace();
    if !value.is_finite() {
        return Err(MetricError::NonFinite("fgd"));
    }
    Ok(value.max(0.0))
}

/// `1/(2N(N−1)) Σ_i Σ_j mean_t ‖p_i,t − p_j,t‖₁` over equally shaped clips.
pub fn div(clips: &[Tensor]) -> Result<f64> {
    let n = clips.len();
    if n < 2 {
        return Err(MetricError::TooFewSamples { need: 2, got: n });
    }
    if clips.iter().any(|c| c.shape() != clips[0].shape()) {
        return Err(MetricError::Shape("clips differ in shape".into()));
    }
    let t = clips[0].rows() as f64;
    let mut total = 0.0;
    for a in clips {
        for b in clips {
            total += a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / t;
        }
    }
    Ok(total / (2.0 * n as f64 * (n as f64 - 1.0)))
}

pub fn mse_face(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(MetricError::Shape(format!("lengths {} vs {}", pred.len(), truth.len())));
    }
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// Mean over `region` and time of `|Δpred − Δtruth|`.
pub fn lvd(pred: &Tensor, truth: &Tensor, region: &[usize]) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(MetricError::Shape(format!("{:?} vs {:?}", pred.shape(), truth.shape())));
    }
    let t = pred.rows();
    if t < 2 {
        return Err(MetricError::TooFewSamples { need: 2, got: t });
    }
    if region.is_empty() || region.iter().any(|&i| i >= pred.cols()) {
        return Err(MetricError::Shape(format!("region indices must lie in 0..{}", pred.cols())));
    }
    let mut s = 0.0;
    for r in 1..t {
        for &i in region {
            let vp = pred.get2(r, i) - pred.get2(r - 1, i);
            let vt = truth.get2(r, i) - truth.get2(r - 1, i);
            s += (vp - vt).abs();
        }
    }
    Ok(s / ((t - 1) * region.len()) as f64)
}

/// Maps facial parameters to the positions compared by MSE and LVD.
pub trait VertexAdapter {
    fn vertices(&self, expression: &[f64]) -> Vec<f64>;
}

/// Compares expression parameters directly.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityAdapter;

impl VertexAdapter for IdentityAdapter {
    fn vertices(&self, expression: &[f64]) -> Vec<f64> {
        expression.to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub feature_window: usize,
    pub feature_dim: usize,
    pub feature_seed: u64,
    /// Frames per clip when splitting a sequence for diversity.
    pub div_clip_len: usize,
    /// Expression indices treated as the lip region; empty means all.
    pub lip_region: Vec<usize>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { feature_window: 16, feature_dim: 8, feature_seed: 0, div_clip_len: 8, lip_region: Vec::new() }
    }
}

impl MetricsConfig {
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("serializable");
        Sha256::digest(&json).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub real_windows: usize,
    pub generated_windows: usize,
    pub div_clips: usize,
    pub compared_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fgd: f64,
    pub div: f64,
    pub mse: f64,
    pub lvd: f64,
    pub sample_counts: SampleCounts,
    pub config_hash: String,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str =
        "fgd,div,mse,lvd,real_windows,generated_windows,div_clips,compared_frames,config_hash";

    pub fn csv_row(&self) -> String {
        let c = self.sample_counts;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.fgd, self.div, self.mse, self.lvd, c.real_windows, c.generated_windows, c.div_clips, c.compared_frames, self.config_hash
        )
    }
}

fn expression_block(seq: &MotionSequence, frames: usize, adapter: &dyn VertexAdapter) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..frames).map(|n| adapter.vertices(&seq.frame(n)[EXPRESSION])).collect();
    Tensor::from_rows(&rows).expect("non-empty")
}

/// All four metrics of `generated` against `reference`.
pub fn evaluate(
    generated: &MotionSequence,
    reference: &MotionSequence,
    cfg: &MetricsConfig,
    adapter: &dyn VertexAdapter,
) -> Result<MetricReport> {
    let fx = FeatureExtractor::new(cfg.feature_window, cfg.feature_dim, cfg.feature_seed)?;
    let real = fx.extract(reference)?;
    let gen = fx.extract(generated)?;
    let fgd_value = fgd(&real, &gen)?;

    let clip_len = cfg.div_clip_len.max(1);
    let clips: Vec<Tensor> = (0..generated.len() / clip_len)
        .map(|c| generated.frames().slice_rows(c * clip_len, (c + 1) * clip_len).slice_cols(POSE.start, POSE.end))
        .collect();
    let div_value = div(&clips)?;

    let frames = generated.len().min(reference.len());
    let pred = expression_block(generated, frames, adapter);
    let truth = expression_block(reference, frames, adapter);
    let mse = mse_face(pred.data(), truth.data())?;
    let region: Vec<usize> = if cfg.lip_region.is_empty() { (0..pred.cols()).collect() } else { cfg.lip_region.clone() };
    let lvd_value = lvd(&pred, &truth, &region)?;

    Ok(MetricReport {
        fgd: fgd_value,
        div: div_value,
        mse,
        lvd: lvd_value,
        sample_counts: SampleCounts {
            real_windows: real.rows(),
            generated_windows: gen.rows(),
            div_clips: clips.len(),
            compared_frames: frames,
        },
        config_hash: cfg.hash(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn randn(rows: usize, cols: usize, seed: u64) -> Tensor {
        Tensor::matrix(rows, cols, standard_normal(&mut seeded(seed), rows * cols)).unwrap()
    }

    #[test]
    fn fgd_zero_on_identical_sets() {
        let x = randn(200, 8, 1);
        assert!(fgd(&x, &x).unwrap() <= 1e-8);
    }

    #[test]
    fn fgd_mean_shift() {
        let r = randn(10_000, 8, 2);
        let mut g = randn(10_000, 8, 3);
        for i in 0..10_000 {
            g.data_mut()[i * 8] += 1.0;
        }
        let v = fgd(&r, &g).unwrap();
        assert!((v - 1.0).abs() <= 0.05, "{v}");
    }

    #[test]
    fn fgd_covariance_scale() {
        let r = randn(10_000, 8, 4);
        let g = randn(10_000, 8, 5).map(|v| 2.0 * v);
        let v = fgd(&r, &g).unwrap();
        assert!((v - 8.0).abs() <= 0.4, "{v}");
    }

    #[test]
    fn fgd_is_symmetric_and_checks_sizes() {
        let a = randn(50, 6, 6);
        let b = randn(60, 6, 7).map(|v| 1.3 * v + 0.2);
        assert!((fgd(&a, &b).unwrap() - fgd(&b, &a).unwrap()).abs() <= 1e-8);
        assert!(matches!(fgd(&randn(6, 6, 8), &b), Err(MetricError::TooFewSamples { need: 7, got: 6 })));
    }

    #[test]
    fn div_examples() {
        let a = randn(4, 3, 9);
        assert_eq!(div(&[a.clone(), a.clone(), a.clone()]).unwrap(), 0.0);
        let b = a.map(|v| v + 0.5);
        // per-frame L1 distance 1.5, so d/2 = 0.75
        assert_eq!(div(&[a.clone(), b.clone()]).unwrap(), 0.75);
        let c = randn(4, 3, 10);
        let x = div(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let y = div(&[c, a, b]).unwrap();
        assert!((x - y).abs() < 1e-15);
        assert!(div(&[randn(2, 2, 1)]).is_err());
    }

    fn brute_mse(p: &[f64], t: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in (0..p.len()).rev() {
            let d = p[i] - t[i];
            acc += d * d;
        }
        acc / p.len() as f64
    }

    fn brute_lvd(p: &Tensor, t: &Tensor, region: &[usize]) -> f64 {
        let mut acc = 0.0;
        let mut n = 0;
        for &i in region {
            for r in 1..p.rows() {
                acc += ((p.get2(r, i) - p.get2(r - 1, i)) - (t.get2(r, i) - t.get2(r - 1, i))).abs();
                n += 1;
            }
        }
        acc / n as f64
    }

    #[test]
    fn mse_and_lvd_examples() {
        let t = randn(5, 4, 11);
        assert_eq!(mse_face(t.data(), t.data()).unwrap(), 0.0);
        assert_eq!(mse_face(t.map(|v| v + 2.0).data(), t.data()).unwrap(), 4.0);
        assert!(mse_face(&[1.0], &[1.0, 2.0]).is_err());

        let all = [0, 1, 2, 3];
        assert_eq!(lvd(&t, &t, &all).unwrap(), 0.0);
        let still = Tensor::zeros(&[5, 4]);
        let moving = Tensor::matrix(5, 4, (0..20).map(|i| -0.3 * (i / 4) as f64).collect()).unwrap();
        assert!((lvd(&still, &moving, &all).unwrap() - 0.3).abs() < 1e-15);
        let p = randn(5, 4, 12);
        assert!((lvd(&p, &t, &[1, 3]).unwrap() - lvd(&p.map(|v| v + 7.25), &t, &[1, 3]).unwrap()).abs() < 1e-12);
        assert!(lvd(&randn(1, 4, 1), &randn(1, 4, 2), &all).is_err());
    }

    proptest! {
        #[test]
        fn mse_and_lvd_match_brute_force(seed in 0u64..100_000) {
            let mut rng: Rng = seeded(seed);
            let (rows, cols) = (rng.random_range(2..9), rng.random_range(1..7));
            let p = randn(rows, cols, seed ^ 1);
            let t = randn(rows, cols, seed ^ 2);
            prop_assert!((mse_face(p.data(), t.data()).unwrap() - brute_mse(p.data(), t.data())).abs() <= 1e-12);
            let region: Vec<usize> = (0..cols).filter(|_| rng.random_bool(0.6)).collect();
            if !region.is_empty() {
                prop_assert!((lvd(&p, &t, &region).unwrap() - brute_lvd(&p, &t, &region)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn extractor_is_deterministic_and_windowed() {
        let fx = FeatureExtractor::new(16, 8, 3).unwrap();
        assert_eq!(fx, FeatureExtractor::new(16, 8, 3).unwrap());
        let seq = MotionSequence::new(randn(20, 437, 4), 30.0).unwrap();
        let f = fx.extract(&seq).unwrap();
        assert_eq!(f.shape(), &[5, 8]);
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let seq = MotionSequence::new(randn(64, 437, 13), 30.0).unwrap();
        let r = evaluate(&seq, &seq, &MetricsConfig::default(), &IdentityAdapter).unwrap();
        assert!(r.fgd <= 1e-6);
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.lvd, 0.0);
        assert!(r.div > 0.0);
        assert_eq!(r.csv_row().split(',').count(), MetricReport::CSV_HEADER.split(',').count());
    }
}
