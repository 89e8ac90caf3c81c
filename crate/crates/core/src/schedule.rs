//! Noise schedule, forward diffusion and the deterministic sampler.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{Latent, LatentClip};
use crate::denoiser::ConditioningPack;
use crate::error::{bail, Result};

pub const DEFAULT_SAMPLER_STEPS: usize = 20;

/// Linear-β schedule. Index `t - 1` of each table holds the value for timestep `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleParams {
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { timesteps: 1000, beta_min: 1e-4, beta_max: 2e-2 }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_min, self.beta_max)
    }
}

pub fn make_schedule(timesteps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        bail!(InvalidArgument, "schedule needs at least one timestep");
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        bail!(InvalidArgument, "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]");
    }
    let alpha: Vec<f64> = (0..timesteps)
        .map(|i| {
            let frac = if timesteps > 1 { i as f64 / (timesteps - 1) as f64 } else { 0.0 };
            1.0 - (beta_min + (beta_max - beta_min) * frac)
        })
        .collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { timesteps, alpha, alpha_bar })
}

impl NoiseSchedule {
    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps {
            bail!(OutOfRange, "timestep {t} outside 1..={}", self.timesteps);
        }
        Ok(())
    }

    /// ᾱ_t for `1 <= t <= T`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// `num_steps` evenly spaced timesteps from `T` downward.
    pub fn sampling_timesteps(&self, num_steps: usize) -> Result<Vec<usize>> {
        if num_steps == 0 || num_steps > self.timesteps {
            bail!(InvalidArgument, "sampler steps must lie in 1..={}, got {num_steps}", self.timesteps);
        }
        let t = self.timesteps;
        Ok((0..num_steps).map(|i| t - i * t / num_steps).collect())
    }
}

/// Standard normal noise shaped like `like`.
pub fn gaussian_like(like: &LatentClip, rng: &mut impl rand::Rng) -> LatentClip {
    LatentClip {
        latents: like
            .latents
            .iter()
            .map(|l| Latent { h: l.h, w: l.w, c: l.c, data: (0..l.len()).map(|_| StandardNormal.sample(rng)).collect() })
            .collect(),
        frame_indices: like.frame_indices.clone(),
    }
}

pub fn gaussian_clip(frames: usize, shape: (usize, usize, usize), rng: &mut impl rand::Rng) -> LatentClip {
    let (h, w, c) = shape;
    let like = LatentClip { latents: vec![Latent::zeros(h, w, c); frames], frame_indices: (0..frames).collect() };
    gaussian_like(&like, rng)
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · ε`
pub fn forward_diffuse(x0: &LatentClip, t: usize, eps: &LatentClip, sched: &NoiseSchedule) -> Result<LatentClip> {
    sched.check_t(t)?;
    diffuse_with(x0, sched.alpha_bar_at(t), eps)
}

pub(crate) fn diffuse_with(x0: &LatentClip, alpha_bar: f64, eps: &LatentClip) -> Result<LatentClip> {
    if !x0.same_shape(eps) {
        bail!(ShapeMismatch, "noise has {} latents of {:?}, clip has {} of {:?}", eps.len(), eps.shape(), x0.len(), x0.shape());
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let latents = x0
        .latents
        .iter()
        .zip(&eps.latents)
        .map(|(x, e)| Latent { h: x.h, w: x.w, c: x.c, data: x.data.iter().zip(&e.data).map(|(xv, ev)| a * xv + b * ev).collect() })
        .collect();
    Ok(LatentClip { latents, frame_indices: x0.frame_indices.clone() })
}

/// A clean-latent predictor `D(x_t, t, conditioning)`.
pub trait Denoise {
    fn predict(&self, noisy: &LatentClip, t: usize, pack: &ConditioningPack) -> Result<LatentClip>;
}

/// The denoiser's direct x₀-prediction.
pub fn one_step_denoise<D: Denoise + ?Sized>(denoiser: &D, x_t: &LatentClip, t: usize, pack: &ConditioningPack) -> Result<LatentClip> {
    denoiser.predict(x_t, t, pack)
}

/// Deterministic sampler: at each timestep predict x₀, recover the implied
/// noise, and move to the next timestep's marginal with that same noise.
pub fn sample<D: Denoise + ?Sized>(
    denoiser: &D,
    frames: usize,
    shape: (usize, usize, usize),
    pack: &ConditioningPack,
    num_steps: usize,
    seed: u64,
    sched: &NoiseSchedule,
) -> Result<LatentClip> {
    let ts = sched.sampling_timesteps(num_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = gaussian_clip(frames, shape, &mut rng);
    for (i, &t) in ts.iter().enumerate() {
        let x0 = denoiser.predict(&x, t, pack)?;
        let Some(&t_next) = ts.get(i + 1) else { return Ok(x0) };
        let (ab, ab_next) = (sched.alpha_bar_at(t), sched.alpha_bar_at(t_next));
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (na, nb) = (ab_next.sqrt(), (1.0 - ab_next).sqrt());
        for (xl, pl) in x.latents.iter_mut().zip(&x0.latents) {
            for (xv, &pv) in xl.data.iter_mut().zip(&pl.data) {
                let eps_hat = (*xv - sa * pv) / sb;
                *xv = na * pv + nb * eps_hat;
            }
        }
    }
    unreachable!("sampling_timesteps returns at least one step")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::ConditionEmbedding;

    fn clip(values: &[f64]) -> LatentClip {
        let latents = values.iter().map(|&v| Latent { h: 1, w: 1, c: 1, data: vec![v] }).collect();
        LatentClip::from_latents(latents).unwrap()
    }

    #[test]
    fn terminal_alpha_bar_matches_independent_product() {
        let s = make_schedule(1000, 1e-4, 2e-2).unwrap();
        // independent loop over β_t = β_min + (t-1)Δ
        let mut prod = 1.0f64;
        for t in 1..=1000u32 {
            let beta = 1e-4 + (2e-2 - 1e-4) * f64::from(t - 1) / 999.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bar_at(1000) - prod).abs() < 1e-12);
        assert!((prod - 4.0e-5).abs() < 0.1e-5, "{prod}");
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar.iter().all(|&a| a > 0.0 && a <= 1.0));
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.01, 0.01).unwrap();
        assert_eq!(s.alpha_bar, vec![0.99]);
        assert!(make_schedule(0, 0.01, 0.02).is_err());
        assert!(make_schedule(10, 0.02, 0.01).is_err());
        assert!(make_schedule(10, 0.0, 0.01).is_err());
    }

    #[test]
    fn diffuse_closed_forms() {
        let x0 = clip(&[0.3, -1.0]);
        let eps = clip(&[2.0, 0.5]);
        assert_eq!(diffuse_with(&x0, 1.0, &eps).unwrap(), x0);
        let zero = clip(&[0.0, 0.0]);
        let xt = diffuse_with(&zero, 0.75, &eps).unwrap();
        assert_eq!(xt.latents[0].data[0], 1.0);
        assert_eq!(xt.latents[1].data[0], 0.25);
        let s = make_schedule(10, 0.01, 0.02).unwrap();
        assert!(forward_diffuse(&x0, 0, &eps, &s).is_err());
        assert!(forward_diffuse(&x0, 11, &eps, &s).is_err());
        assert!(forward_diffuse(&x0, 3, &clip(&[1.0]), &s).is_err());
    }

    struct Zero;
    impl Denoise for Zero {
        fn predict(&self, noisy: &LatentClip, _t: usize, _p: &ConditioningPack) -> Result<LatentClip> {
            let mut out = noisy.clone();
            out.latents.iter_mut().for_each(|l| l.data.iter_mut().for_each(|v| *v = 0.0));
            Ok(out)
        }
    }

    /// Predicts a fixed clip regardless of input.
    struct Memorized(LatentClip);
    impl Denoise for Memorized {
        fn predict(&self, _noisy: &LatentClip, _t: usize, _p: &ConditioningPack) -> Result<LatentClip> {
            Ok(self.0.clone())
        }
    }

    fn pack() -> ConditioningPack {
        ConditioningPack::new(ConditionEmbedding { vector: vec![0.0; 4] }, Latent::zeros(1, 1, 1))
    }

    #[test]
    fn sampler_contracts() {
        let s = make_schedule(100, 1e-4, 2e-2).unwrap();
        let p = pack();
        let a = sample(&Zero, 3, (1, 1, 1), &p, 1, 5, &s).unwrap();
        assert!(a.values().all(|v| v == 0.0));
        let target = clip(&[0.25, -0.5, 0.75]);
        let m = Memorized(target.clone());
        let x = sample(&m, 3, (1, 1, 1), &p, 20, 9, &s).unwrap();
        assert_eq!(x, target);
        let ts = s.sampling_timesteps(20).unwrap();
        assert_eq!(ts.first(), Some(&100));
        assert!(ts.windows(2).all(|w| w[1] < w[0]));
        assert!(s.sampling_timesteps(0).is_err());
    }
}
