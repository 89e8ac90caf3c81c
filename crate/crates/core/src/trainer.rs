//! Training loops for the coarse and fine denoisers.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::codec::{Codec, Latent, LatentClip};
use crate::denoiser::{clip_to_rows, forward_on_tape, gradients, init_params, ConditioningPack, DenoiserConfig, DenoiserParams};
use crate::error::{bail, Result};
use crate::losses::{coarse_loss_on_tape, diffusion_loss_on_tape, make_fine_conditioning, LossWeights};
use crate::schedule::{forward_diffuse, gaussian_like, NoiseSchedule};
use crate::tensor::Mat;
use crate::toyworld::{ConditionEmbedding, Episode};
use crate::trajwarp::{warp_with_poses, CameraPose, Intrinsics, DEFAULT_DEPTH};

/// Width and depth of the denoiser built by the trainer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub token_patch: usize,
    pub token_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self { token_patch: 2, token_dim: 64, num_blocks: 2, num_heads: 4, mlp_ratio: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Frames per clip.
    #[serde(rename = "K")]
    pub k: usize,
    pub coarse_stride: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub codec_patch: usize,
    pub model: ModelDims,
    /// Fine training only: condition on warped copies of the clip's first frame.
    pub warp_injection: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 13,
            coarse_stride: 12,
            steps: 200,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 0,
            weights: LossWeights::default(),
            codec_patch: 4,
            model: ModelDims::default(),
            warp_injection: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            bail!(InvalidArgument, "K must be at least 2, got {}", self.k);
        }
        if self.coarse_stride == 0 {
            bail!(InvalidArgument, "coarse_stride must be at least 1");
        }
        if self.batch_size == 0 {
            bail!(InvalidArgument, "batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bail!(InvalidArgument, "learning_rate must be positive, got {}", self.learning_rate);
        }
        self.weights.validate()
    }

    /// Frames needed for one clip at `stride`.
    pub fn span(&self, stride: usize) -> usize {
        (self.k - 1) * stride + 1
    }

    pub fn denoiser_config(&self, latent_shape: (usize, usize, usize), cond_dim: usize, timesteps: usize, warp: bool) -> DenoiserConfig {
        DenoiserConfig {
            num_frames: self.k,
            latent_h: latent_shape.0,
            latent_w: latent_shape.1,
            latent_c: latent_shape.2,
            token_patch: self.model.token_patch,
            token_dim: self.model.token_dim,
            num_blocks: self.model.num_blocks,
            num_heads: self.model.num_heads,
            cond_dim,
            mlp_ratio: self.model.mlp_ratio,
            timesteps,
            warp_injection: warp,
        }
    }
}

/// Adam moments, rounded to `f32` like the parameters they track.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &DenoiserParams) -> Self {
        let zeros: Vec<Mat> = params.tensors.iter().map(|t| Mat::zeros(t.rows, t.cols)).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }
}

fn to_f32_grid(x: f64) -> f64 {
    f64::from(x as f32)
}

/// One bias-corrected Adam update. Parameters and moments are stored on the
/// `f32` grid so checkpoints reload bitwise.
pub fn optimizer_step(params: &mut DenoiserParams, grads: &[Mat], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.tensors.len() || state.m.len() != params.tensors.len() {
        bail!(ShapeMismatch, "{} gradients for {} tensors", grads.len(), params.tensors.len());
    }
    for (i, (g, p)) in grads.iter().zip(&params.tensors).enumerate() {
        if g.shape() != p.shape() {
            bail!(ShapeMismatch, "gradient {} has shape {:?}, parameter {:?}", params.names[i], g.shape(), p.shape());
        }
        if !g.is_finite() {
            bail!(NonFinite, "gradient for {} is not finite", params.names[i]);
        }
    }
    state.step += 1;
    let step = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(step);
    let c2 = 1.0 - ADAM_BETA2.powi(step);
    for ((p, g), (m, v)) in params.tensors.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for j in 0..p.data.len() {
            let gj = g.data[j];
            let mj = ADAM_BETA1 * m.data[j] + (1.0 - ADAM_BETA1) * gj;
            let vj = ADAM_BETA2 * v.data[j] + (1.0 - ADAM_BETA2) * gj * gj;
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + ADAM_EPS);
            m.data[j] = to_f32_grid(mj);
            v.data[j] = to_f32_grid(vj);
            p.data[j] = to_f32_grid(p.data[j] - update);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub loss_diffusion: f64,
    pub loss_struct: f64,
}

pub fn write_loss_csv(path: &Path, trace: &[LossRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss,loss_diffusion,loss_struct")?;
    for r in trace {
        writeln!(f, "{},{},{},{}", r.step, r.loss, r.loss_diffusion, r.loss_struct)?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<LossRecord>,
    /// Frame indices of every clip drawn, in draw order.
    pub sampled_indices: Vec<Vec<usize>>,
}

/// Per-episode latents, encoded once.
pub(crate) struct EncodedEpisode<'a> {
    pub episode: &'a Episode,
    pub latents: Vec<Latent>,
}

pub(crate) fn encode_dataset<'a>(dataset: &'a [Episode], codec: &Codec) -> Result<Vec<EncodedEpisode<'a>>> {
    if dataset.is_empty() {
        bail!(InvalidArgument, "dataset is empty");
    }
    dataset
        .iter()
        .map(|ep| {
            let latents = ep.frames.par_iter().map(|f| codec.encode_frame(f)).collect::<Result<Vec<_>>>()?;
            Ok(EncodedEpisode { episode: ep, latents })
        })
        .collect()
}

pub(crate) fn clip_at(enc: &EncodedEpisode, start: usize, k: usize, stride: usize) -> LatentClip {
    let indices: Vec<usize> = (0..k).map(|i| start + i * stride).collect();
    LatentClip { latents: indices.iter().map(|&i| enc.latents[i].clone()).collect(), frame_indices: indices }
}

/// K frames at `coarse_stride` from a random start, with first-frame conditioning.
pub fn sample_coarse_clip(episode: &Episode, config: &TrainConfig, codec: &Codec, rng: &mut impl Rng) -> Result<(LatentClip, ConditioningPack)> {
    config.validate()?;
    let span = config.span(config.coarse_stride);
    if episode.len() < span {
        bail!(InvalidArgument, "episode has {} frames, coarse clip needs {span}", episode.len());
    }
    let start = rng.gen_range(0..=episode.len() - span);
    let indices: Vec<usize> = (0..config.k).map(|i| start + i * config.coarse_stride).collect();
    let clip = codec.encode_clip(&episode.frames, &indices)?;
    let pack = ConditioningPack::new(episode.descriptor.clone(), clip.latents[0].clone());
    Ok((clip, pack))
}

/// Latents of `frame0` warped by the relative ground-truth poses of `indices`.
pub fn warp_latents_for(episode: &Episode, indices: &[usize], codec: &Codec) -> Result<LatentClip> {
    let base = episode.poses[indices[0]];
    let poses: Vec<CameraPose> = indices.iter().map(|&i| episode.poses[i].relative_to(&base)).collect();
    let frame0 = &episode.frames[indices[0]];
    let intr = Intrinsics::for_image(frame0.width, frame0.height);
    let warped = warp_with_poses(frame0, &poses, &intr, DEFAULT_DEPTH)?;
    let latents = warped.iter().map(|w| codec.encode_frame(&w.frame)).collect::<Result<Vec<_>>>()?;
    LatentClip::new(latents, indices.to_vec())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Stage {
    Coarse,
    Fine,
}

struct Sample {
    target: LatentClip,
    noisy: LatentClip,
    t: usize,
    pack: ConditioningPack,
}

struct SampleLoss {
    total: f64,
    diffusion: f64,
    structure: f64,
    grads: Vec<Mat>,
}

fn sample_loss(params: &DenoiserParams, s: &Sample, stage: Stage, weights: &LossWeights) -> Result<SampleLoss> {
    let target = clip_to_rows(&s.target);
    let shape = params.config.latent_shape();
    let mut parts = (0.0, 0.0);
    let (total, grads) = gradients(params, |tape, vars| {
        let out = forward_on_tape(tape, vars, params, &s.noisy, s.t, &s.pack)?;
        Ok(match stage {
            Stage::Coarse => {
                let terms = coarse_loss_on_tape(tape, out, &target, shape, weights);
                parts = (tape.value(terms.diffusion).data[0], terms.structure.map_or(0.0, |v| tape.value(v).data[0]));
                terms.total
            }
            Stage::Fine => {
                let d = diffusion_loss_on_tape(tape, out, &target);
                parts = (tape.value(d).data[0], 0.0);
                d
            }
        })
    })?;
    Ok(SampleLoss { total, diffusion: parts.0, structure: parts.1, grads })
}

fn starting_point(init: Option<&Checkpoint>, config: DenoiserConfig, seed: u64) -> Result<Checkpoint> {
    match init {
        None => Ok(Checkpoint::new(init_params(&config, seed)?)),
        Some(ck) => {
            ck.verify_digest()?;
            let params = if config.warp_injection && !ck.params.config.warp_injection {
                ck.params.with_warp(seed)?
            } else {
                ck.params.clone()
            };
            if params.config != config {
                bail!(Incompatible, "initial checkpoint config does not match the training config");
            }
            if params.tensors.len() == ck.params.tensors.len() {
                Ok(ck.clone())
            } else {
                Ok(Checkpoint { train_step: ck.train_step, ..Checkpoint::new(params) })
            }
        }
    }
}

fn train_loop(
    dataset: &[Episode],
    config: &TrainConfig,
    sched: &NoiseSchedule,
    stage: Stage,
    init: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.steps == 0 {
        bail!(InvalidArgument, "steps must be at least 1");
    }
    let codec = Codec::new(config.codec_patch)?;
    let stride = if stage == Stage::Coarse { config.coarse_stride } else { 1 };
    let span = config.span(stride);
    let encoded = encode_dataset(dataset, &codec)?;
    let usable: Vec<usize> = (0..encoded.len()).filter(|&i| encoded[i].latents.len() >= span).collect();
    if usable.is_empty() {
        bail!(InvalidArgument, "no episode has the {span} frames a clip needs");
    }
    let first = &encoded[usable[0]];
    let latent_shape = first.latents[0].shape();
    let cond_dim = first.episode.descriptor.len();
    let warp = stage == Stage::Fine && config.warp_injection;
    let model_cfg = config.denoiser_config(latent_shape, cond_dim, sched.timesteps, warp);
    let mut ckpt = starting_point(init, model_cfg, config.seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);
    let mut warp_cache: HashMap<(usize, usize), LatentClip> = HashMap::new();
    let mut trace = Vec::with_capacity(config.steps);
    let mut sampled_indices = Vec::new();
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let ei = usable[rng.gen_range(0..usable.len())];
            let enc = &encoded[ei];
            let start = rng.gen_range(0..=enc.latents.len() - span);
            let target = clip_at(enc, start, config.k, stride);
            let t = rng.gen_range(1..=sched.timesteps);
            let eps = gaussian_like(&target, &mut rng);
            let noisy = forward_diffuse(&target, t, &eps, sched)?;
            let cond: &ConditionEmbedding = &enc.episode.descriptor;
            let mut pack = match stage {
                Stage::Coarse => ConditioningPack::new(cond.clone(), target.latents[0].clone()),
                Stage::Fine => make_fine_conditioning(&target, cond, config.weights.drop_ratio, &mut rng)?,
            };
            if warp {
                let key = (ei, start);
                if let std::collections::hash_map::Entry::Vacant(e) = warp_cache.entry(key) {
                    e.insert(warp_latents_for(enc.episode, &target.frame_indices, &codec)?);
                }
                pack.warp_latents = Some(warp_cache[&key].clone());
            }
            sampled_indices.push(target.frame_indices.clone());
            batch.push(Sample { target, noisy, t, pack });
        }
        let results: Vec<Result<SampleLoss>> = batch.par_iter().map(|s| sample_loss(&ckpt.params, s, stage, &config.weights)).collect();
        let mut grads: Vec<Mat> = ckpt.params.tensors.iter().map(|t| Mat::zeros(t.rows, t.cols)).collect();
        let mut rec = LossRecord { step, loss: 0.0, loss_diffusion: 0.0, loss_struct: 0.0 };
        let inv = 1.0 / config.batch_size as f64;
        for r in results {
            let r = r.map_err(|e| crate::error::Error::NonFinite(format!("training diverged at step {step}: {e}")))?;
            rec.loss += r.total * inv;
            rec.loss_diffusion += r.diffusion * inv;
            rec.loss_struct += r.structure * inv;
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                acc.add_assign(&g.scaled(inv));
            }
        }
        optimizer_step(&mut ckpt.params, &grads, &mut ckpt.adam, config.learning_rate)?;
        ckpt.train_step += 1;
        trace.push(rec);
    }
    Ok(TrainOutcome { checkpoint: ckpt, trace, sampled_indices })
}

/// Minimises the combined coarse objective on clips at `coarse_stride`.
pub fn train_coarse(dataset: &[Episode], config: &TrainConfig, sched: &NoiseSchedule) -> Result<TrainOutcome> {
    train_loop(dataset, config, sched, Stage::Coarse, None)
}

/// Minimises the diffusion objective on consecutive-frame clips with a randomly dropped last-frame condition.
pub fn train_fine(dataset: &[Episode], config: &TrainConfig, sched: &NoiseSchedule) -> Result<TrainOutcome> {
    train_loop(dataset, config, sched, Stage::Fine, None)
}

/// Continues training from `init`. A non-warp checkpoint gains zero-gated
/// warp weights when `config.warp_injection` is set.
pub fn train_fine_from(init: &Checkpoint, dataset: &[Episode], config: &TrainConfig, sched: &NoiseSchedule) -> Result<TrainOutcome> {
    train_loop(dataset, config, sched, Stage::Fine, Some(init))
}

pub fn train_coarse_from(init: &Checkpoint, dataset: &[Episode], config: &TrainConfig, sched: &NoiseSchedule) -> Result<TrainOutcome> {
    train_loop(dataset, config, sched, Stage::Coarse, Some(init))
}

/// Mean of `trace[range]` losses.
pub fn window_mean(trace: &[LossRecord], range: std::ops::Range<usize>) -> f64 {
    let w = &trace[range];
    w.iter().map(|r| r.loss).sum::<f64>() / w.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_schedule;
    use crate::toyworld::{gen_episode, WorldParams};

    fn world() -> WorldParams {
        WorldParams { image_height: 16, image_width: 16, seed: 3, ..WorldParams::default() }
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            k: 3,
            coarse_stride: 4,
            steps: 2,
            batch_size: 2,
            model: ModelDims { token_patch: 2, token_dim: 8, num_blocks: 1, num_heads: 2, mlp_ratio: 2 },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn coarse_clip_indices() {
        let ep = gen_episode(&WorldParams { image_height: 16, image_width: 16, ..world() }, 145).unwrap();
        let codec = Codec::default();
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (clip, pack) = sample_coarse_clip(&ep, &cfg, &codec, &mut rng).unwrap();
        assert_eq!(clip.frame_indices, (0..13).map(|i| i * 12).collect::<Vec<_>>());
        assert_eq!(pack.first_latent, clip.latents[0]);
        let two = TrainConfig { k: 2, coarse_stride: 1, ..cfg.clone() };
        let (c2, _) = sample_coarse_clip(&ep, &two, &codec, &mut rng).unwrap();
        assert_eq!(c2.frame_indices[1], c2.frame_indices[0] + 1);
        let short = gen_episode(&world(), 100).unwrap();
        assert!(sample_coarse_clip(&short, &cfg, &codec, &mut rng).is_err());
    }

    #[test]
    fn adam_closed_form_and_zero_gradient() {
        let cfg = crate::denoiser::DenoiserConfig { num_frames: 2, ..crate::denoiser::DenoiserConfig::new(2, (2, 2, 3)) };
        let cfg = DenoiserConfig { token_dim: 4, num_heads: 1, num_blocks: 1, cond_dim: 2, ..cfg };
        let mut p = init_params(&cfg, 0).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let zeros: Vec<Mat> = p.tensors.iter().map(|t| Mat::zeros(t.rows, t.cols)).collect();
        optimizer_step(&mut p, &zeros, &mut st, 0.1).unwrap();
        assert_eq!(p, before);

        let mut st = AdamState::new(&p);
        let ones: Vec<Mat> = p.tensors.iter().map(|t| Mat::filled(t.rows, t.cols, 1.0)).collect();
        optimizer_step(&mut p, &ones, &mut st, 0.1).unwrap();
        // m̂ = 1, v̂ = 1 ⇒ step = 0.1 / (1 + 1e-8)
        let d = before.tensors[0].data[0] - p.tensors[0].data[0];
        assert!((d - 0.1).abs() < 1e-6, "{d}");
        let mut nan = ones.clone();
        nan[0].data[0] = f64::NAN;
        assert!(optimizer_step(&mut p, &nan, &mut st, 0.1).is_err());
    }

    #[test]
    fn training_is_deterministic_and_counts_steps() {
        let eps = vec![gen_episode(&world(), 20).unwrap()];
        let sched = make_schedule(100, 1e-4, 2e-2).unwrap();
        let cfg = TrainConfig { steps: 1, ..small_config() };
        let a = train_coarse(&eps, &cfg, &sched).unwrap();
        assert_eq!(a.trace.len(), 1);
        assert_eq!(a.checkpoint.adam.step, 1);
        assert_eq!(a.checkpoint.train_step, 1);
        let cfg = small_config();
        let a = train_coarse(&eps, &cfg, &sched).unwrap();
        let b = train_coarse(&eps, &cfg, &sched).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.checkpoint, b.checkpoint);
        assert!(a.sampled_indices.iter().all(|ix| ix.windows(2).all(|w| w[1] - w[0] == 4)));
        let f = train_fine(&eps, &cfg, &sched).unwrap();
        assert!(f.sampled_indices.iter().all(|ix| ix.windows(2).all(|w| w[1] - w[0] == 1)));
        assert!(f.trace.iter().all(|r| r.loss_struct == 0.0 && r.loss == r.loss_diffusion));
    }

    #[test]
    fn warp_fine_tuning_starts_from_zero_gates() {
        let eps = vec![gen_episode(&world(), 20).unwrap()];
        let sched = make_schedule(100, 1e-4, 2e-2).unwrap();
        let cfg = small_config();
        let base = train_fine(&eps, &cfg, &sched).unwrap();
        let warp_cfg = TrainConfig { warp_injection: true, steps: 1, ..cfg };
        let tuned = train_fine_from(&base.checkpoint, &eps, &warp_cfg, &sched).unwrap();
        assert!(tuned.checkpoint.params.config.warp_injection);
        assert!(tuned.checkpoint.params.warp_gates().iter().any(|&g| g != 0.0));
    }
}
