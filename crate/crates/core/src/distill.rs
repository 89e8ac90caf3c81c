//! Distils the frozen fine model's one-step predictions into the coarse model.
//!
//! A dense window of `(K_c − 1)(m + 1) + 1` frames is marked at every
//! `(m + 1)`-th position. Each gap between marks, endpoints included, is one
//! segment of `m + 2` frames. One timestep and one noise tensor are drawn per
//! step: every segment and the student see slices of that same tensor.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::codec::{Codec, Latent, LatentClip};
use crate::denoiser::{clip_to_rows, forward_on_tape, gradients, ConditioningPack, DenoiserParams};
use crate::error::{bail, Result};
use crate::losses::diffusion_loss_on_tape;
use crate::schedule::{forward_diffuse, gaussian_like, Denoise, NoiseSchedule};
use crate::toyworld::{ConditionEmbedding, Episode};
use crate::trainer::{clip_at, encode_dataset, optimizer_step, AdamState, LossRecord};

#[derive(Clone, Debug, PartialEq)]
pub struct DistillSequence {
    pub latents: LatentClip,
    pub coarse_positions: Vec<usize>,
    pub segments: Vec<(usize, usize)>,
    pub cond: ConditionEmbedding,
}

pub fn sequence_len(k_c: usize, m: usize) -> usize {
    (k_c - 1) * (m + 1) + 1
}

/// Coarse positions and inclusive segment bounds for `(K_c, m)`.
pub fn sequence_layout(k_c: usize, m: usize) -> Result<(Vec<usize>, Vec<(usize, usize)>)> {
    if k_c < 2 {
        bail!(InvalidArgument, "K_c must be at least 2, got {k_c}");
    }
    let coarse = (0..k_c).map(|i| i * (m + 1)).collect();
    let segments = (0..k_c - 1).map(|i| (i * (m + 1), (i + 1) * (m + 1))).collect();
    Ok((coarse, segments))
}

impl DistillSequence {
    /// Builds the sequence over `latents`, which must hold exactly `sequence_len(k_c, m)` entries.
    pub fn from_latents(latents: LatentClip, k_c: usize, m: usize, cond: ConditionEmbedding) -> Result<Self> {
        let (coarse_positions, segments) = sequence_layout(k_c, m)?;
        if latents.len() != sequence_len(k_c, m) {
            bail!(ShapeMismatch, "distillation sequence needs {} latents, got {}", sequence_len(k_c, m), latents.len());
        }
        Ok(Self { latents, coarse_positions, segments, cond })
    }

    pub fn coarse_latents(&self) -> LatentClip {
        self.pick(&self.latents, &self.coarse_positions)
    }

    fn pick(&self, clip: &LatentClip, positions: &[usize]) -> LatentClip {
        LatentClip {
            latents: positions.iter().map(|&p| clip.latents[p].clone()).collect(),
            frame_indices: positions.iter().map(|&p| clip.frame_indices[p]).collect(),
        }
    }
}

/// Samples a random contiguous window of `episode` and encodes it.
pub fn build_distill_sequence(
    episode: &Episode,
    k_c: usize,
    m: usize,
    fine_k: usize,
    codec: &Codec,
    rng: &mut impl Rng,
) -> Result<DistillSequence> {
    if m + 2 != fine_k {
        bail!(Incompatible, "segment length m + 2 = {} differs from the fine model's K = {fine_k}", m + 2);
    }
    let n = sequence_len(k_c.max(2), m);
    if k_c < 2 || episode.len() < n {
        bail!(InvalidArgument, "episode has {} frames, distillation sequence needs {n}", episode.len());
    }
    let start = rng.gen_range(0..=episode.len() - n);
    let indices: Vec<usize> = (start..start + n).collect();
    let latents = codec.encode_clip(&episode.frames, &indices)?;
    DistillSequence::from_latents(latents, k_c, m, episode.descriptor.clone())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JointTarget {
    /// Mean of the two segments' predictions at a shared coarse position.
    #[default]
    Average,
    /// Prediction of the earlier segment.
    FirstOccurrence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseConsumer {
    Segment(usize),
    Student,
}

/// What one consumer saw of the step's shared noise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NoiseRecord {
    pub step: usize,
    pub consumer: NoiseConsumer,
    pub t: usize,
    /// Digest of the full noise tensor the slice was cut from.
    pub noise_digest: String,
    pub slice_digest: String,
}

pub fn clip_digest(clip: &LatentClip) -> String {
    let mut h = Sha256::new();
    for v in clip.values() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn pick_positions(clip: &LatentClip, positions: impl Iterator<Item = usize>) -> LatentClip {
    let positions: Vec<usize> = positions.collect();
    LatentClip {
        latents: positions.iter().map(|&p| clip.latents[p].clone()).collect(),
        frame_indices: positions.iter().map(|&p| clip.frame_indices[p]).collect(),
    }
}

fn average(a: &Latent, b: &Latent) -> Latent {
    Latent { h: a.h, w: a.w, c: a.c, data: a.data.iter().zip(&b.data).map(|(x, y)| 0.5 * (x + y)).collect() }
}

/// Frozen-teacher one-step predictions at the coarse positions.
pub fn teacher_targets<D: Denoise + Sync + ?Sized>(
    fine: &D,
    seq: &DistillSequence,
    t: usize,
    eps: &LatentClip,
    sched: &NoiseSchedule,
    joint: JointTarget,
    mut observe: impl FnMut(NoiseConsumer, &LatentClip),
) -> Result<LatentClip> {
    if !eps.same_shape(&seq.latents) {
        bail!(ShapeMismatch, "noise covers {} latents, sequence has {}", eps.len(), seq.latents.len());
    }
    sched.check_t(t)?;
    let mut slices = Vec::with_capacity(seq.segments.len());
    for (i, &(a, b)) in seq.segments.iter().enumerate() {
        let e = eps.slice(a, b + 1);
        observe(NoiseConsumer::Segment(i), &e);
        slices.push(e);
    }
    let preds: Vec<LatentClip> = seq
        .segments
        .par_iter()
        .zip(&slices)
        .map(|(&(a, b), e)| {
            let x0 = seq.latents.slice(a, b + 1);
            let noisy = forward_diffuse(&x0, t, e, sched)?;
            let pack = ConditioningPack::bidirectional(seq.cond.clone(), x0.latents[0].clone(), x0.latents[x0.len() - 1].clone());
            fine.predict(&noisy, t, &pack)
        })
        .collect::<Result<_>>()?;
    let k_c = seq.coarse_positions.len();
    let mut latents = Vec::with_capacity(k_c);
    for j in 0..k_c {
        let from_left = (j > 0).then(|| preds[j - 1].latents.last().expect("segment has frames"));
        let from_right = (j < k_c - 1).then(|| &preds[j].latents[0]);
        latents.push(match (from_left, from_right, joint) {
            (Some(l), Some(r), JointTarget::Average) => average(l, r),
            (Some(l), Some(_), JointTarget::FirstOccurrence) => l.clone(),
            (Some(l), None, _) => l.clone(),
            (None, Some(r), _) => r.clone(),
            (None, None, _) => unreachable!("K_c >= 2"),
        });
    }
    LatentClip::new(latents, seq.coarse_positions.iter().map(|&p| seq.latents.frame_indices[p]).collect())
}

/// One student update toward `targets`; returns the pre-update loss.
#[allow(clippy::too_many_arguments)]
pub fn distill_step(
    coarse: &mut DenoiserParams,
    opt: &mut AdamState,
    targets: &LatentClip,
    seq: &DistillSequence,
    t: usize,
    eps: &LatentClip,
    sched: &NoiseSchedule,
    lr: f64,
    mut observe: impl FnMut(NoiseConsumer, &LatentClip),
) -> Result<f64> {
    if targets.len() != seq.coarse_positions.len() {
        bail!(ShapeMismatch, "{} targets for {} coarse positions", targets.len(), seq.coarse_positions.len());
    }
    let x0 = seq.coarse_latents();
    let e = pick_positions(eps, seq.coarse_positions.iter().copied());
    observe(NoiseConsumer::Student, &e);
    let noisy = forward_diffuse(&x0, t, &e, sched)?;
    let pack = ConditioningPack::new(seq.cond.clone(), x0.latents[0].clone());
    let target_rows = clip_to_rows(targets);
    let params = &*coarse;
    let (loss, grads) = gradients(params, |tape, vars| {
        let out = forward_on_tape(tape, vars, params, &noisy, t, &pack)?;
        Ok(diffusion_loss_on_tape(tape, out, &target_rows))
    })?;
    optimizer_step(coarse, &grads, opt, lr)?;
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    #[serde(rename = "K_c")]
    pub k_c: usize,
    pub m: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub joint_target: JointTarget,
    pub codec_patch: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { k_c: 13, m: 11, steps: 500, learning_rate: 1e-3, seed: 0, joint_target: JointTarget::Average, codec_patch: 4 }
    }
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<LossRecord>,
    pub noise_log: Vec<NoiseRecord>,
}

/// Refuses checkpoints whose digest or shapes do not line up.
pub fn check_compatible(coarse: &Checkpoint, fine: &Checkpoint, config: &DistillConfig) -> Result<()> {
    coarse.verify_digest()?;
    fine.verify_digest()?;
    let (c, f) = (coarse.config(), fine.config());
    if c.num_frames != config.k_c {
        bail!(Incompatible, "coarse model has K = {}, distillation expects K_c = {}", c.num_frames, config.k_c);
    }
    if f.num_frames != config.m + 2 {
        bail!(Incompatible, "fine model has K = {}, segments need m + 2 = {}", f.num_frames, config.m + 2);
    }
    if c.latent_shape() != f.latent_shape() || c.cond_dim != f.cond_dim || c.timesteps != f.timesteps {
        bail!(Incompatible, "coarse and fine models disagree on latent shape, condition size or timesteps");
    }
    Ok(())
}

/// Seeded distillation loop. The fine checkpoint is only read.
pub fn run_distillation(
    coarse: &Checkpoint,
    fine: &Checkpoint,
    dataset: &[Episode],
    config: &DistillConfig,
    sched: &NoiseSchedule,
) -> Result<DistillOutcome> {
    check_compatible(coarse, fine, config)?;
    if coarse.config().timesteps != sched.timesteps {
        bail!(Incompatible, "model timesteps {} differ from schedule {}", coarse.config().timesteps, sched.timesteps);
    }
    let mut ckpt = coarse.clone();
    if config.steps == 0 {
        return Ok(DistillOutcome { checkpoint: ckpt, trace: Vec::new(), noise_log: Vec::new() });
    }
    let codec = Codec::new(config.codec_patch)?;
    let n = sequence_len(config.k_c, config.m);
    let encoded = encode_dataset(dataset, &codec)?;
    let usable: Vec<usize> = (0..encoded.len()).filter(|&i| encoded[i].latents.len() >= n).collect();
    if usable.is_empty() {
        bail!(InvalidArgument, "no episode has the {n} frames a distillation sequence needs");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xd157_1000);
    let mut trace = Vec::with_capacity(config.steps);
    let log = RefCell::new(Vec::new());
    for step in 0..config.steps {
        let enc = &encoded[usable[rng.gen_range(0..usable.len())]];
        let start = rng.gen_range(0..=enc.latents.len() - n);
        let seq = DistillSequence::from_latents(clip_at(enc, start, n, 1), config.k_c, config.m, enc.episode.descriptor.clone())?;
        let t = rng.gen_range(1..=sched.timesteps);
        let eps = gaussian_like(&seq.latents, &mut rng);
        let noise_digest = clip_digest(&eps);
        let record = |consumer: NoiseConsumer, slice: &LatentClip| {
            log.borrow_mut().push(NoiseRecord { step, consumer, t, noise_digest: noise_digest.clone(), slice_digest: clip_digest(slice) });
        };
        let targets = teacher_targets(&fine.params, &seq, t, &eps, sched, config.joint_target, &record)?;
        let loss = distill_step(&mut ckpt.params, &mut ckpt.adam, &targets, &seq, t, &eps, sched, config.learning_rate, &record)?;
        ckpt.train_step += 1;
        trace.push(LossRecord { step, loss, loss_diffusion: loss, loss_struct: 0.0 });
    }
    Ok(DistillOutcome { checkpoint: ckpt, trace, noise_log: log.into_inner() })
}
