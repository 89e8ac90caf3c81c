//! Training objectives and the fine-model conditioning draw.

use std::rc::Rc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::codec::{Latent, LatentClip};
use crate::denoiser::ConditioningPack;
use crate::error::{bail, Result};
use crate::tensor::Mat;
use crate::toyworld::ConditionEmbedding;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub beta_s: f64,
    pub drop_ratio: f64,
    /// High-pass cutoff as a fraction of the Nyquist radius.
    pub cutoff: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { beta_s: 0.1, drop_ratio: 0.5, cutoff: 0.25 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_s >= 0.0 && self.beta_s.is_finite()) {
            bail!(InvalidArgument, "beta_s must be a finite nonnegative number, got {}", self.beta_s);
        }
        if !(0.0..=1.0).contains(&self.drop_ratio) {
            bail!(InvalidArgument, "drop_ratio must lie in [0, 1], got {}", self.drop_ratio);
        }
        check_cutoff(self.cutoff)
    }
}

fn check_cutoff(rho: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rho) {
        bail!(InvalidArgument, "cutoff must lie in [0, 1), got {rho}");
    }
    Ok(())
}

fn check_pair(a: &LatentClip, b: &LatentClip) -> Result<()> {
    if !a.same_shape(b) || a.is_empty() {
        bail!(ShapeMismatch, "clips differ: {} latents of {:?} vs {} of {:?}", a.len(), a.shape(), b.len(), b.shape());
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn diffusion_loss(prediction: &LatentClip, target: &LatentClip) -> Result<f64> {
    check_pair(prediction, target)?;
    let n = prediction.num_elements() as f64;
    Ok(prediction.values().zip(target.values()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

fn signed_freq(k: usize, n: usize) -> f64 {
    let k = k as f64;
    let n_f = n as f64;
    if k < n_f / 2.0 {
        k / n_f
    } else {
        (k - n_f) / n_f
    }
}

fn radial_keep(h: usize, w: usize, rho: f64) -> Vec<bool> {
    let cut = rho * 0.5;
    let mut keep = Vec::with_capacity(h * w);
    for ky in 0..h {
        let fy = signed_freq(ky, h);
        for kx in 0..w {
            let fx = signed_freq(kx, w);
            keep.push((fx * fx + fy * fy).sqrt() >= cut);
        }
    }
    keep
}

/// Filters an `h × w × c` array stored row-major with channels last.
fn highpass_raw(data: &[f64], h: usize, w: usize, c: usize, rho: f64, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    if rho == 0.0 {
        return data.to_vec();
    }
    let keep = radial_keep(h, w, rho);
    let (row_fwd, row_inv) = (planner.plan_fft_forward(w), planner.plan_fft_inverse(w));
    let (col_fwd, col_inv) = (planner.plan_fft_forward(h), planner.plan_fft_inverse(h));
    let mut out = vec![0.0; data.len()];
    let mut buf = vec![Complex::new(0.0, 0.0); h * w];
    let mut col = vec![Complex::new(0.0, 0.0); h];
    let scale = 1.0 / (h * w) as f64;
    for ch in 0..c {
        for (i, z) in buf.iter_mut().enumerate() {
            *z = Complex::new(data[i * c + ch], 0.0);
        }
        buf.chunks_exact_mut(w).for_each(|r| row_fwd.process(r));
        for x in 0..w {
            (0..h).for_each(|y| col[y] = buf[y * w + x]);
            col_fwd.process(&mut col);
            (0..h).for_each(|y| buf[y * w + x] = if keep[y * w + x] { col[y] } else { Complex::new(0.0, 0.0) });
        }
        for x in 0..w {
            (0..h).for_each(|y| col[y] = buf[y * w + x]);
            col_inv.process(&mut col);
            (0..h).for_each(|y| buf[y * w + x] = col[y]);
        }
        buf.chunks_exact_mut(w).for_each(|r| row_inv.process(r));
        for (i, z) in buf.iter().enumerate() {
            out[i * c + ch] = z.re * scale;
        }
    }
    out
}

/// Per-channel 2D spectral high-pass: bins with radial frequency below
/// `rho` times the Nyquist radius are zeroed.
pub fn highpass(latent: &Latent, rho: f64) -> Result<Latent> {
    check_cutoff(rho)?;
    let mut planner = FftPlanner::new();
    Ok(Latent { h: latent.h, w: latent.w, c: latent.c, data: highpass_raw(&latent.data, latent.h, latent.w, latent.c, rho, &mut planner) })
}

/// Applies [`highpass`] to every row of a `K × (h·w·c)` matrix.
pub fn highpass_rows(m: &Mat, shape: (usize, usize, usize), rho: f64) -> Mat {
    let (h, w, c) = shape;
    let mut planner = FftPlanner::new();
    let mut out = Mat::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        let f = highpass_raw(m.row(r), h, w, c, rho, &mut planner);
        out.row_mut(r).copy_from_slice(&f);
    }
    out
}

/// Mean squared error between high-passed frames, averaged over frames.
pub fn struct_loss(prediction: &LatentClip, target: &LatentClip, rho: f64) -> Result<f64> {
    check_pair(prediction, target)?;
    check_cutoff(rho)?;
    let mut total = 0.0;
    for (a, b) in prediction.latents.iter().zip(&target.latents) {
        let (fa, fb) = (highpass(a, rho)?, highpass(b, rho)?);
        total += fa.data.iter().zip(&fb.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / fa.len() as f64;
    }
    Ok(total / prediction.len() as f64)
}

pub fn coarse_loss(prediction: &LatentClip, target: &LatentClip, weights: &LossWeights) -> Result<f64> {
    Ok(diffusion_loss(prediction, target)? + weights.beta_s * struct_loss(prediction, target, weights.cutoff)?)
}

/// Differentiable loss terms for a prediction node in `K × (h·w·c)` layout.
pub struct LossTerms {
    pub total: Var,
    pub diffusion: Var,
    pub structure: Option<Var>,
}

pub fn diffusion_loss_on_tape(tape: &mut Tape, prediction: Var, target: &Mat) -> Var {
    tape.mse_const(prediction, Rc::new(target.clone()))
}

/// Structure term on the tape; the filter is its own adjoint.
pub fn struct_loss_on_tape(tape: &mut Tape, prediction: Var, target: &Mat, shape: (usize, usize, usize), rho: f64) -> Var {
    let filtered_target = highpass_rows(target, shape, rho);
    let adjoint: crate::autodiff::LinearFn = Rc::new(move |g: &Mat| highpass_rows(g, shape, rho));
    let filtered = tape.linear(prediction, |x| highpass_rows(x, shape, rho), adjoint);
    tape.mse_const(filtered, Rc::new(filtered_target))
}

pub fn coarse_loss_on_tape(
    tape: &mut Tape,
    prediction: Var,
    target: &Mat,
    shape: (usize, usize, usize),
    weights: &LossWeights,
) -> LossTerms {
    let diffusion = diffusion_loss_on_tape(tape, prediction, target);
    if weights.beta_s == 0.0 {
        return LossTerms { total: diffusion, diffusion, structure: None };
    }
    let s = struct_loss_on_tape(tape, prediction, target, shape, weights.cutoff);
    let scaled = tape.scale(s, weights.beta_s);
    let total = tape.add(diffusion, scaled);
    LossTerms { total, diffusion, structure: Some(s) }
}

/// First and last latents of `clip` as conditioning; the last is dropped
/// with probability `drop_ratio`.
pub fn make_fine_conditioning(
    clip: &LatentClip,
    cond_embed: &ConditionEmbedding,
    drop_ratio: f64,
    rng: &mut impl Rng,
) -> Result<ConditioningPack> {
    if clip.len() < 2 {
        bail!(InvalidArgument, "fine conditioning needs at least 2 latents, got {}", clip.len());
    }
    if !(0.0..=1.0).contains(&drop_ratio) {
        bail!(InvalidArgument, "drop_ratio must lie in [0, 1], got {drop_ratio}");
    }
    let drop = rng.gen::<f64>() < drop_ratio;
    let mut pack = ConditioningPack::bidirectional(cond_embed.clone(), clip.latents[0].clone(), clip.latents[clip.len() - 1].clone());
    pack.last_drop = drop;
    Ok(pack)
}
