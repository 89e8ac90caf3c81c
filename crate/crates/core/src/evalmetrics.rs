//! Fréchet distance over fixed random video features, joint coherence, and timing reports.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::Frame;
use crate::error::{bail, Result};

pub const STATIC_FEATURES: usize = 64;
pub const VIDEO_FEATURES: usize = 2 * STATIC_FEATURES;
const CHANNELS: [usize; 4] = [3, 16, 32, 64];
const COV_REG: f64 = 1e-6;

struct Conv {
    cin: usize,
    cout: usize,
    /// `[cout][ky][kx][cin]`
    w: Vec<f64>,
    b: Vec<f64>,
}

/// Untrained three-stage strided convolution network with global average pooling.
pub struct FeatureExtractor {
    pub seed: u64,
    convs: Vec<Conv>,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = CHANNELS
            .windows(2)
            .map(|c| {
                let (cin, cout) = (c[0], c[1]);
                let dist = Normal::new(0.0, (2.0 / (9 * cin) as f64).sqrt()).expect("positive std");
                let w = (0..cout * 9 * cin).map(|_| dist.sample(&mut rng)).collect();
                let b = (0..cout).map(|_| 0.1 * dist.sample(&mut rng)).collect();
                Conv { cin, cout, w, b }
            })
            .collect();
        Self { seed, convs }
    }

    /// 3×3 convolutions, stride 2, zero padding 1, ReLU; then the spatial mean.
    pub fn frame_features(&self, frame: &Frame) -> Vec<f64> {
        let (mut h, mut w) = (frame.height, frame.width);
        let mut x = frame.data.clone();
        for conv in &self.convs {
            let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
            let mut y = vec![0.0; oh * ow * conv.cout];
            for oy in 0..oh {
                for ox in 0..ow {
                    let out = &mut y[(oy * ow + ox) * conv.cout..][..conv.cout];
                    out.copy_from_slice(&conv.b);
                    for ky in 0..3 {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let input = &x[(iy as usize * w + ix as usize) * conv.cin..][..conv.cin];
                            for (co, o) in out.iter_mut().enumerate() {
                                let wk = &conv.w[((co * 3 + ky) * 3 + kx) * conv.cin..][..conv.cin];
                                *o += wk.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                    out.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
            x = y;
            (h, w) = (oh, ow);
        }
        let c = *CHANNELS.last().expect("nonempty");
        let mut pooled = vec![0.0; c];
        for px in x.chunks_exact(c) {
            pooled.iter_mut().zip(px).for_each(|(p, v)| *p += v);
        }
        let n = (h * w) as f64;
        pooled.iter_mut().for_each(|p| *p /= n);
        pooled
    }

    /// Mean per-frame feature followed by the mean absolute first difference.
    pub fn video_features(&self, video: &[Frame]) -> Result<Vec<f64>> {
        if video.is_empty() {
            bail!(InvalidArgument, "video has no frames");
        }
        let per: Vec<Vec<f64>> = video.par_iter().map(|f| self.frame_features(f)).collect();
        Ok(pool_video(&per))
    }
}

fn pool_video(per: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; VIDEO_FEATURES];
    let n = per.len() as f64;
    for f in per {
        out[..STATIC_FEATURES].iter_mut().zip(f).for_each(|(o, v)| *o += v / n);
    }
    if per.len() > 1 {
        let nd = (per.len() - 1) as f64;
        for w in per.windows(2) {
            for (i, o) in out[STATIC_FEATURES..].iter_mut().enumerate() {
                *o += (w[1][i] - w[0][i]).abs() / nd;
            }
        }
    }
    out
}

/// One row of [`VIDEO_FEATURES`] values per video, in order.
pub fn extract_features(videos: &[Vec<Frame>], extractor: &FeatureExtractor) -> Result<Vec<Vec<f64>>> {
    if videos.is_empty() {
        bail!(InvalidArgument, "no videos to featurize");
    }
    videos.iter().map(|v| extractor.video_features(v)).collect()
}

fn moments(rows: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mu = DVector::zeros(d);
    for r in rows {
        mu += DVector::from_column_slice(r);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let c = DVector::from_column_slice(r) - &mu;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    for i in 0..d {
        cov[(i, i)] += COV_REG;
    }
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa^{1/2} Σb Σa^{1/2})^{1/2})`
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        bail!(InvalidArgument, "each feature set needs at least 2 rows, got {} and {}", a.len(), b.len());
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|r| r.len() != d) {
        bail!(ShapeMismatch, "feature widths differ");
    }
    let (mu_a, cov_a) = moments(a);
    let (mu_b, cov_b) = moments(b);
    let sa = sym_sqrt(&cov_a);
    let mut inner = &sa * &cov_b * &sa;
    inner = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let dist = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_cross;
    Ok(dist.max(0.0))
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Excess feature change across coarse joints: the mean over `joints` of the
/// two adjacent-step distances, minus the mean adjacent-step distance over
/// steps touching no joint. Every joint needs both neighbours in range.
pub fn boundary_jump(video: &[Frame], joints: &[usize], extractor: &FeatureExtractor) -> Result<f64> {
    if joints.is_empty() {
        bail!(InvalidArgument, "no joints given");
    }
    let n = video.len();
    if let Some(&j) = joints.iter().find(|&&j| j == 0 || j + 1 >= n) {
        bail!(OutOfRange, "joint {j} needs neighbours inside a {n}-frame video");
    }
    let feats: Vec<Vec<f64>> = video.par_iter().map(|f| extractor.frame_features(f)).collect();
    let step: Vec<f64> = feats.windows(2).map(|w| l2(&w[0], &w[1])).collect();
    let jump = joints.iter().map(|&j| 0.5 * (step[j] + step[j - 1])).sum::<f64>() / joints.len() as f64;
    let touches = |i: usize| joints.contains(&i) || joints.contains(&(i + 1));
    let quiet: Vec<f64> = (0..step.len()).filter(|&i| !touches(i)).map(|i| step[i]).collect();
    let baseline = if quiet.is_empty() { step.iter().sum::<f64>() / step.len() as f64 } else { quiet.iter().sum::<f64>() / quiet.len() as f64 };
    Ok(jump - baseline)
}

/// Coarse indices with both neighbours inside an `n`-frame video.
pub fn interior_joints(coarse_indices: &[usize], n: usize) -> Vec<usize> {
    coarse_indices.iter().copied().filter(|&j| j > 0 && j + 1 < n).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub name: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub phases: Vec<PhaseTiming>,
    pub total_seconds: f64,
    pub frames: usize,
    pub fps: f64,
    pub baseline_seconds: Option<f64>,
    pub speedup: Option<f64>,
}

impl TimingReport {
    pub fn phase(&self, name: &str) -> Option<f64> {
        self.phases.iter().find(|p| p.name == name).map(|p| p.seconds)
    }
}

/// Uses the `total` phase when present, else the sum of phases.
pub fn timing_report(phases: &[PhaseTiming], frames: usize, baseline_seconds: Option<f64>) -> Result<TimingReport> {
    if phases.is_empty() {
        bail!(InvalidArgument, "no phase timings");
    }
    let total = phases.iter().find(|p| p.name == "total").map_or_else(|| phases.iter().map(|p| p.seconds).sum(), |p| p.seconds);
    let fps = if total > 0.0 { frames as f64 / total } else { f64::INFINITY };
    let speedup = baseline_seconds.map(|b| b / total);
    Ok(TimingReport { phases: phases.to_vec(), total_seconds: total, frames, fps, baseline_seconds, speedup })
}
