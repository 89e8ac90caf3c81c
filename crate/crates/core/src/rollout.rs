//! Video generation: hierarchical coarse-then-fine rollout, the single-rate
//! autoregressive baseline, and warp-guided trajectory rollout.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, Frame, Latent, LatentClip};
use crate::denoiser::{ConditioningPack, DenoiserParams};
use crate::error::{bail, Error, Result};
use crate::evalmetrics::PhaseTiming;
use crate::schedule::{sample, NoiseSchedule};
use crate::toyworld::ConditionEmbedding;
use crate::trajwarp::{warp_sequence, Intrinsics, TrajectorySpec, DEFAULT_DEPTH};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutPlan {
    #[serde(rename = "K_c")]
    pub k_c: usize,
    pub m: usize,
    pub n_coarse_rollouts: usize,
    pub total_frames: usize,
    /// Global frame index of every coarse frame, shared block boundaries counted once.
    pub coarse_indices: Vec<usize>,
    /// Global (left, right) coarse frame indices of every gap with interior frames.
    pub segments: Vec<(usize, usize)>,
}

impl RolloutPlan {
    pub fn block_len(&self) -> usize {
        (self.k_c - 1) * (self.m + 1) + 1
    }
}

/// Smallest chain of coarse blocks covering `total_frames`.
pub fn plan_rollout(total_frames: usize, k_c: usize, m: usize) -> Result<RolloutPlan> {
    if k_c < 2 {
        bail!(InvalidArgument, "K_c must be at least 2, got {k_c}");
    }
    if total_frames < k_c {
        bail!(InvalidArgument, "{total_frames} frames requested, fewer than K_c = {k_c}");
    }
    let block = (k_c - 1) * (m + 1) + 1;
    let n = if total_frames <= block { 1 } else { 1 + (total_frames - block).div_ceil(block - 1) };
    let total = block + (n - 1) * (block - 1);
    let coarse_indices: Vec<usize> = (0..=n * (k_c - 1)).map(|i| i * (m + 1)).collect();
    let segments = if m == 0 { Vec::new() } else { coarse_indices.windows(2).map(|w| (w[0], w[1])).collect() };
    Ok(RolloutPlan { k_c, m, n_coarse_rollouts: n, total_frames: total, coarse_indices, segments })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent per-task seed, so results do not depend on execution order.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(base) ^ stream) ^ index)
}

const STREAM_COARSE: u64 = 1;
const STREAM_SEGMENT: u64 = 2;
const STREAM_CHAIN: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerOptions {
    pub sampler_steps: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self { sampler_steps: crate::schedule::DEFAULT_SAMPLER_STEPS, seed: 0, workers: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct RolloutOutput {
    pub frames: Vec<Frame>,
    pub latents: LatentClip,
    /// Global indices of frames produced directly by the coarse model, or by each chained rollout's first frame.
    pub coarse_indices: Vec<usize>,
    pub timings: Vec<PhaseTiming>,
}

fn check_model(p: &DenoiserParams, shape: (usize, usize, usize), cond: &ConditionEmbedding, what: &str) -> Result<()> {
    let c = &p.config;
    if c.latent_shape() != shape {
        bail!(Incompatible, "{what} model expects latents {:?}, first frame encodes to {shape:?}", c.latent_shape());
    }
    if c.cond_dim != cond.len() {
        bail!(Incompatible, "{what} model expects a condition of length {}, got {}", c.cond_dim, cond.len());
    }
    Ok(())
}

fn decode_all(codec: &Codec, latents: &[Latent]) -> Result<Vec<Frame>> {
    latents.par_iter().map(|l| codec.decode_latent(l).map(|f| f.clamped())).collect()
}

fn timed<T>(timings: &mut Vec<PhaseTiming>, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t0 = Instant::now();
    let out = f()?;
    timings.push(PhaseTiming { name: name.into(), seconds: t0.elapsed().as_secs_f64() });
    Ok(out)
}

/// Coarse frames first, then every gap filled independently by the fine
/// model with both endpoints conditioned. Gaps run on `workers` threads.
#[allow(clippy::too_many_arguments)]
pub fn hierarchical_rollout(
    coarse: &DenoiserParams,
    fine: &DenoiserParams,
    first_frame: &Frame,
    cond: &ConditionEmbedding,
    plan: &RolloutPlan,
    opts: &SamplerOptions,
    sched: &NoiseSchedule,
    codec: &Codec,
) -> Result<RolloutOutput> {
    let start = Instant::now();
    let first = codec.encode_frame(first_frame)?;
    let shape = first.shape();
    check_model(coarse, shape, cond, "coarse")?;
    if coarse.config.num_frames != plan.k_c {
        bail!(Incompatible, "coarse model has K = {}, plan needs K_c = {}", coarse.config.num_frames, plan.k_c);
    }
    if plan.m > 0 {
        check_model(fine, shape, cond, "fine")?;
        if fine.config.num_frames != plan.m + 2 {
            bail!(Incompatible, "fine model has K = {}, plan needs m + 2 = {}", fine.config.num_frames, plan.m + 2);
        }
    }
    if opts.workers == 0 {
        bail!(InvalidArgument, "workers must be at least 1");
    }
    let mut timings = Vec::new();

    let coarse_latents = timed(&mut timings, "coarse", || {
        let mut out = vec![first.clone()];
        for b in 0..plan.n_coarse_rollouts {
            let pack = ConditioningPack::new(cond.clone(), out.last().expect("nonempty").clone());
            let seed = derive_seed(opts.seed, STREAM_COARSE, b as u64);
            let block = sample(coarse, plan.k_c, shape, &pack, opts.sampler_steps, seed, sched)?;
            out.extend(block.latents.into_iter().skip(1));
        }
        Ok(out)
    })?;

    let interiors: Vec<Vec<Latent>> = timed(&mut timings, "interpolation", || {
        if plan.m == 0 {
            return Ok(Vec::new());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
        pool.install(|| {
            (0..coarse_latents.len() - 1)
                .into_par_iter()
                .map(|i| {
                    let pack = ConditioningPack::bidirectional(cond.clone(), coarse_latents[i].clone(), coarse_latents[i + 1].clone());
                    let seed = derive_seed(opts.seed, STREAM_SEGMENT, i as u64);
                    let seg = sample(fine, plan.m + 2, shape, &pack, opts.sampler_steps, seed, sched)?;
                    Ok(seg.latents[1..=plan.m].to_vec())
                })
                .collect::<Result<Vec<_>>>()
        })
    })?;

    let mut latents = Vec::with_capacity(plan.total_frames);
    for (i, c) in coarse_latents.iter().enumerate() {
        latents.push(c.clone());
        if let Some(inner) = interiors.get(i) {
            latents.extend(inner.iter().cloned());
        }
    }
    debug_assert_eq!(latents.len(), plan.total_frames);
    let frames = timed(&mut timings, "decode", || decode_all(codec, &latents))?;
    timings.push(PhaseTiming { name: "total".into(), seconds: start.elapsed().as_secs_f64() });
    let n = latents.len();
    Ok(RolloutOutput { frames, latents: LatentClip::new(latents, (0..n).collect())?, coarse_indices: plan.coarse_indices.clone(), timings })
}

/// Total frames of `n` chained `k`-frame rollouts with one shared frame between neighbours.
pub fn chain_len(k: usize, n: usize) -> usize {
    k + (n - 1) * (k - 1)
}

fn chained(
    fine: &DenoiserParams,
    first: Latent,
    cond: &ConditionEmbedding,
    n_rollouts: usize,
    opts: &SamplerOptions,
    sched: &NoiseSchedule,
    warp: Option<&[Latent]>,
) -> Result<Vec<Latent>> {
    let k = fine.config.num_frames;
    let shape = first.shape();
    let mut out = vec![first];
    for r in 0..n_rollouts {
        let mut pack = ConditioningPack::new(cond.clone(), out.last().expect("nonempty").clone());
        if let Some(w) = warp {
            let base = r * (k - 1);
            pack.warp_latents = Some(LatentClip::from_latents(w[base..base + k].to_vec())?);
        }
        let seed = derive_seed(opts.seed, STREAM_CHAIN, r as u64);
        let clip = sample(fine, k, shape, &pack, opts.sampler_steps, seed, sched)?;
        out.extend(clip.latents.into_iter().skip(1));
    }
    Ok(out)
}

/// Fine model in causal mode, each rollout conditioned on the previous rollout's last frame.
pub fn autoregressive_rollout(
    fine: &DenoiserParams,
    first_frame: &Frame,
    cond: &ConditionEmbedding,
    n_rollouts: usize,
    opts: &SamplerOptions,
    sched: &NoiseSchedule,
    codec: &Codec,
) -> Result<RolloutOutput> {
    if n_rollouts == 0 {
        bail!(InvalidArgument, "n_rollouts must be at least 1");
    }
    let start = Instant::now();
    let first = codec.encode_frame(first_frame)?;
    check_model(fine, first.shape(), cond, "fine")?;
    let mut timings = Vec::new();
    let latents = timed(&mut timings, "generation", || chained(fine, first, cond, n_rollouts, opts, sched, None))?;
    let frames = timed(&mut timings, "decode", || decode_all(codec, &latents))?;
    timings.push(PhaseTiming { name: "total".into(), seconds: start.elapsed().as_secs_f64() });
    let k = fine.config.num_frames;
    let n = latents.len();
    Ok(RolloutOutput {
        frames,
        latents: LatentClip::new(latents, (0..n).collect())?,
        coarse_indices: (0..n_rollouts).map(|r| r * (k - 1)).collect(),
        timings,
    })
}

/// Warps `first_frame` along `spec` and feeds the warped latents to a
/// warp-trained fine model, chaining causal rollouts until `spec.num_frames` are produced.
pub fn trajectory_rollout(
    fine_warp: &DenoiserParams,
    first_frame: &Frame,
    spec: &TrajectorySpec,
    cond: &ConditionEmbedding,
    opts: &SamplerOptions,
    sched: &NoiseSchedule,
    codec: &Codec,
) -> Result<RolloutOutput> {
    if !fine_warp.config.warp_injection {
        bail!(Incompatible, "trajectory rollout needs a fine model trained with warp injection");
    }
    let start = Instant::now();
    let first = codec.encode_frame(first_frame)?;
    check_model(fine_warp, first.shape(), cond, "fine")?;
    let k = fine_warp.config.num_frames;
    let n_frames = spec.num_frames;
    let n_rollouts = if n_frames <= k { 1 } else { 1 + (n_frames - k).div_ceil(k - 1) };
    let mut timings = Vec::new();
    let warp = timed(&mut timings, "warp", || {
        let intr = Intrinsics::for_image(first_frame.width, first_frame.height);
        let warped = warp_sequence(first_frame, spec, &intr, DEFAULT_DEPTH)?;
        let mut lat = warped.iter().map(|w| codec.encode_frame(&w.frame)).collect::<Result<Vec<_>>>()?;
        let last = lat.last().expect("at least two trajectory frames").clone();
        lat.resize(chain_len(k, n_rollouts), last);
        Ok(lat)
    })?;
    let mut latents = timed(&mut timings, "generation", || chained(fine_warp, first, cond, n_rollouts, opts, sched, Some(&warp)))?;
    latents.truncate(n_frames);
    let frames = timed(&mut timings, "decode", || decode_all(codec, &latents))?;
    timings.push(PhaseTiming { name: "total".into(), seconds: start.elapsed().as_secs_f64() });
    let n = latents.len();
    Ok(RolloutOutput {
        frames,
        latents: LatentClip::new(latents, (0..n).collect())?,
        coarse_indices: (0..n_rollouts).map(|r| r * (k - 1)).filter(|&i| i < n).collect(),
        timings,
    })
}
