//! Miniature diffusion transformer shared by the coarse and fine models.
//!
//! Each frame's latent is concatenated along channels with a conditioning
//! latent and a binary mask channel, cut into `p × p` latent patches and
//! linearly embedded. Learned frame and spatial position embeddings, a
//! sinusoidal timestep embedding and the projected condition vector are added
//! to every token. Blocks are pre-norm full self-attention plus an MLP. When
//! warp injection is enabled, patch-embedded warp latents are added to the
//! hidden states in front of every block, scaled by that block's gate.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::codec::{Latent, LatentClip};
use crate::error::{bail, Error, Result};
use crate::schedule::Denoise;
use crate::tensor::Mat;
use crate::toyworld::ConditionEmbedding;

pub const TIME_FEATURES: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub num_frames: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    pub latent_c: usize,
    /// Side of the latent patch that forms one token.
    pub token_patch: usize,
    pub token_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub cond_dim: usize,
    pub mlp_ratio: usize,
    /// Largest valid timestep.
    pub timesteps: usize,
    pub warp_injection: bool,
}

impl DenoiserConfig {
    pub fn new(num_frames: usize, latent_shape: (usize, usize, usize)) -> Self {
        Self {
            num_frames,
            latent_h: latent_shape.0,
            latent_w: latent_shape.1,
            latent_c: latent_shape.2,
            token_patch: 2,
            token_dim: 64,
            num_blocks: 2,
            num_heads: 4,
            cond_dim: crate::toyworld::DESCRIPTOR_LEN,
            mlp_ratio: 2,
            timesteps: 1000,
            warp_injection: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_frames < 2 {
            bail!(InvalidArgument, "denoiser needs at least 2 frames, got {}", self.num_frames);
        }
        if self.token_dim == 0 || self.num_heads == 0 || !self.token_dim.is_multiple_of(self.num_heads) {
            bail!(InvalidArgument, "token_dim {} must be a positive multiple of num_heads {}", self.token_dim, self.num_heads);
        }
        let p = self.token_patch;
        if p == 0 || self.latent_h == 0 || self.latent_w == 0 || !self.latent_h.is_multiple_of(p) || !self.latent_w.is_multiple_of(p) {
            bail!(InvalidArgument, "latent {}x{} not divisible by token patch {p}", self.latent_h, self.latent_w);
        }
        if self.latent_c == 0 || self.cond_dim == 0 || self.mlp_ratio == 0 || self.timesteps == 0 {
            bail!(InvalidArgument, "latent channels, cond_dim, mlp_ratio and timesteps must be positive");
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (self.latent_h, self.latent_w, self.latent_c)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.latent_h / self.token_patch, self.latent_w / self.token_patch)
    }

    pub fn tokens_per_frame(&self) -> usize {
        let (a, b) = self.grid();
        a * b
    }

    pub fn num_tokens(&self) -> usize {
        self.num_frames * self.tokens_per_frame()
    }

    fn patch_area(&self) -> usize {
        self.token_patch * self.token_patch
    }

    pub fn input_dim(&self) -> usize {
        self.patch_area() * (2 * self.latent_c + 1)
    }

    pub fn output_dim(&self) -> usize {
        self.patch_area() * self.latent_c
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Zero,
}

#[derive(Clone, Debug)]
struct BlockIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    gate: Option<usize>,
}

#[derive(Clone, Debug)]
struct Layout {
    specs: Vec<(String, usize, usize, Init)>,
    embed_w: usize,
    embed_b: usize,
    pos_frame: usize,
    pos_space: usize,
    time_w1: usize,
    time_b1: usize,
    time_w2: usize,
    time_b2: usize,
    cond_w: usize,
    cond_b: usize,
    blocks: Vec<BlockIdx>,
    warp_w: Option<usize>,
    head_w: usize,
    head_b: usize,
}

impl Layout {
    fn new(cfg: &DenoiserConfig) -> Self {
        let mut specs = Vec::new();
        let mut add = |name: String, r: usize, c: usize, init: Init| {
            specs.push((name, r, c, init));
            specs.len() - 1
        };
        let d = cfg.token_dim;
        let xavier = |fan_in: usize| Init::Normal((1.0 / fan_in as f64).sqrt());
        let embed_w = add("embed.w".into(), cfg.input_dim(), d, xavier(cfg.input_dim()));
        let embed_b = add("embed.b".into(), 1, d, Init::Zero);
        let pos_frame = add("pos.frame".into(), cfg.num_frames, d, Init::Normal(0.1));
        let pos_space = add("pos.space".into(), cfg.tokens_per_frame(), d, Init::Normal(0.1));
        let time_w1 = add("time.w1".into(), TIME_FEATURES, d, xavier(TIME_FEATURES));
        let time_b1 = add("time.b1".into(), 1, d, Init::Zero);
        let time_w2 = add("time.w2".into(), d, d, xavier(d));
        let time_b2 = add("time.b2".into(), 1, d, Init::Zero);
        let cond_w = add("cond.w".into(), cfg.cond_dim, d, xavier(cfg.cond_dim));
        let cond_b = add("cond.b".into(), 1, d, Init::Zero);
        let hidden = d * cfg.mlp_ratio;
        let blocks = (0..cfg.num_blocks)
            .map(|i| {
                let mut w = |n: &str, r, c, init| add(format!("blocks.{i}.{n}"), r, c, init);
                BlockIdx {
                    wq: w("attn.wq", d, d, xavier(d)),
                    bq: w("attn.bq", 1, d, Init::Zero),
                    wk: w("attn.wk", d, d, xavier(d)),
                    bk: w("attn.bk", 1, d, Init::Zero),
                    wv: w("attn.wv", d, d, xavier(d)),
                    bv: w("attn.bv", 1, d, Init::Zero),
                    wo: w("attn.wo", d, d, xavier(d)),
                    bo: w("attn.bo", 1, d, Init::Zero),
                    w1: w("mlp.w1", d, hidden, xavier(d)),
                    b1: w("mlp.b1", 1, hidden, Init::Zero),
                    w2: w("mlp.w2", hidden, d, xavier(hidden)),
                    b2: w("mlp.b2", 1, d, Init::Zero),
                    gate: cfg.warp_injection.then(|| w("warp_gate", 1, 1, Init::Zero)),
                }
            })
            .collect();
        let warp_w = cfg.warp_injection.then(|| add("warp.w".into(), cfg.output_dim(), d, xavier(cfg.output_dim())));
        let head_w = add("head.w".into(), d, cfg.output_dim(), Init::Zero);
        let head_b = add("head.b".into(), 1, cfg.output_dim(), Init::Zero);
        Self {
            specs,
            embed_w,
            embed_b,
            pos_frame,
            pos_space,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            cond_w,
            cond_b,
            blocks,
            warp_w,
            head_w,
            head_b,
        }
    }
}

/// All trainable tensors of one denoiser, in a fixed order determined by the config.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Mat>,
}

/// Per-tensor gradients aligned with [`DenoiserParams::tensors`].
pub type ParamGrads = Vec<Mat>;

pub fn init_params(config: &DenoiserConfig, seed: u64) -> Result<DenoiserParams> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::with_capacity(layout.specs.len());
    let mut tensors = Vec::with_capacity(layout.specs.len());
    for (name, r, c, init) in &layout.specs {
        let m = match *init {
            Init::Zero => Mat::zeros(*r, *c),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                Mat::from_vec(*r, *c, (0..r * c).map(|_| f64::from(dist.sample(&mut rng) as f32)).collect())
            }
        };
        names.push(name.clone());
        tensors.push(m);
    }
    Ok(DenoiserParams { config: config.clone(), names, tensors })
}

impl DenoiserParams {
    /// Rebuilds params from named tensors, checking names and shapes against the config.
    pub fn from_tensors(config: DenoiserConfig, named: Vec<(String, Mat)>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if named.len() != layout.specs.len() {
            bail!(ShapeMismatch, "expected {} tensors, got {}", layout.specs.len(), named.len());
        }
        for ((name, m), (want, r, c, _)) in named.iter().zip(&layout.specs) {
            if name != want || m.shape() != (*r, *c) {
                bail!(ShapeMismatch, "tensor {name} {:?} does not match expected {want} ({r}, {c})", m.shape());
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self { config, names, tensors })
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&Mat> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Mat::is_finite)
    }

    /// SHA-256 over every tensor's bytes in order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.update(n.as_bytes());
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn warp_gates(&self) -> Vec<f64> {
        self.names.iter().zip(&self.tensors).filter(|(n, _)| n.ends_with("warp_gate")).map(|(_, t)| t.data[0]).collect()
    }

    /// Drops warp-injection tensors, yielding the equivalent non-injected model.
    pub fn without_warp(&self) -> DenoiserParams {
        let config = DenoiserConfig { warp_injection: false, ..self.config.clone() };
        let (names, tensors) = self
            .names
            .iter()
            .zip(&self.tensors)
            .filter(|(n, _)| !(n.ends_with("warp_gate") || n.starts_with("warp.")))
            .map(|(n, t)| (n.clone(), t.clone()))
            .unzip();
        DenoiserParams { config, names, tensors }
    }

    /// Adds freshly initialised warp tensors (zero gates) to a non-injected model.
    pub fn with_warp(&self, seed: u64) -> Result<DenoiserParams> {
        if self.config.warp_injection {
            return Ok(self.clone());
        }
        let config = DenoiserConfig { warp_injection: true, ..self.config.clone() };
        let fresh = init_params(&config, seed)?;
        let tensors = fresh
            .names
            .iter()
            .zip(fresh.tensors)
            .map(|(n, t)| self.tensor(n).cloned().unwrap_or(t))
            .collect();
        Ok(DenoiserParams { config, names: fresh.names, tensors })
    }
}

/// Conditioning for one denoiser call.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningPack {
    pub cond_embed: ConditionEmbedding,
    pub first_latent: Latent,
    pub last_latent: Option<Latent>,
    /// Hides `last_latent` from the model.
    pub last_drop: bool,
    pub warp_latents: Option<LatentClip>,
}

impl ConditioningPack {
    /// First-frame conditioning only.
    pub fn new(cond_embed: ConditionEmbedding, first_latent: Latent) -> Self {
        Self { cond_embed, first_latent, last_latent: None, last_drop: false, warp_latents: None }
    }

    /// Both endpoints conditioned, nothing dropped.
    pub fn bidirectional(cond_embed: ConditionEmbedding, first: Latent, last: Latent) -> Self {
        Self { cond_embed, first_latent: first, last_latent: Some(last), last_drop: false, warp_latents: None }
    }

    pub fn with_warp(mut self, warp: LatentClip) -> Self {
        self.warp_latents = Some(warp);
        self
    }

    fn uses_last(&self) -> bool {
        self.last_latent.is_some() && !self.last_drop
    }
}

/// Non-differentiable inputs of one forward pass, already in token layout.
struct Prepared {
    tokens: Mat,
    warp_tokens: Option<Mat>,
    cond: Mat,
    time: Mat,
}

fn check_latent(cfg: &DenoiserConfig, l: &Latent, what: &str) -> Result<()> {
    if l.shape() != cfg.latent_shape() || l.data.len() != l.h * l.w * l.c {
        bail!(ShapeMismatch, "{what} has shape {:?}, model expects {:?}", l.shape(), cfg.latent_shape());
    }
    Ok(())
}

/// Rows are tokens; columns run over `(dy, dx, channel)` of each token patch.
fn patchify(cfg: &DenoiserConfig, frames: &[&dyn Fn(usize, usize, usize) -> f64], channels: usize) -> Mat {
    let p = cfg.token_patch;
    let (gh, gw) = cfg.grid();
    let per = cfg.tokens_per_frame();
    let mut m = Mat::zeros(frames.len() * per, p * p * channels);
    for (k, f) in frames.iter().enumerate() {
        for ty in 0..gh {
            for tx in 0..gw {
                let row = m.row_mut(k * per + ty * gw + tx);
                let mut j = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        for ch in 0..channels {
                            row[j] = f(ty * p + dy, tx * p + dx, ch);
                            j += 1;
                        }
                    }
                }
            }
        }
    }
    m
}

fn time_features(t: usize) -> Mat {
    let half = TIME_FEATURES / 2;
    let mut v = Vec::with_capacity(TIME_FEATURES);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        v.push(a.sin());
        v.push(a.cos());
    }
    Mat::from_vec(1, TIME_FEATURES, v)
}

fn prepare(cfg: &DenoiserConfig, noisy: &LatentClip, t: usize, pack: &ConditioningPack) -> Result<Prepared> {
    if noisy.len() != cfg.num_frames {
        bail!(ShapeMismatch, "model expects {} frames, got {}", cfg.num_frames, noisy.len());
    }
    for l in &noisy.latents {
        check_latent(cfg, l, "noisy latent")?;
    }
    if t == 0 || t > cfg.timesteps {
        bail!(OutOfRange, "timestep {t} outside 1..={}", cfg.timesteps);
    }
    if pack.cond_embed.len() != cfg.cond_dim {
        bail!(ShapeMismatch, "condition vector has length {}, model expects {}", pack.cond_embed.len(), cfg.cond_dim);
    }
    check_latent(cfg, &pack.first_latent, "first-frame condition")?;
    if let Some(last) = &pack.last_latent {
        check_latent(cfg, last, "last-frame condition")?;
    }
    let c = cfg.latent_c;
    let k_last = cfg.num_frames - 1;
    let zero = |_: usize, _: usize, _: usize| 0.0;
    let cond_at = |k: usize| -> Option<&Latent> {
        if k == 0 {
            Some(&pack.first_latent)
        } else if k == k_last && pack.uses_last() {
            pack.last_latent.as_ref()
        } else {
            None
        }
    };
    let closures: Vec<Box<dyn Fn(usize, usize, usize) -> f64 + '_>> = (0..cfg.num_frames)
        .map(|k| {
            let x = &noisy.latents[k];
            let cond = cond_at(k);
            Box::new(move |y: usize, xx: usize, ch: usize| {
                if ch < c {
                    x.at(y, xx, ch)
                } else if ch < 2 * c {
                    cond.map_or(0.0, |l| l.at(y, xx, ch - c))
                } else if cond.is_some() {
                    1.0
                } else {
                    0.0
                }
            }) as Box<dyn Fn(usize, usize, usize) -> f64>
        })
        .collect();
    let refs: Vec<&dyn Fn(usize, usize, usize) -> f64> = closures.iter().map(|b| b.as_ref()).collect();
    let tokens = patchify(cfg, &refs, 2 * c + 1);
    let _ = zero;

    let warp_tokens = match &pack.warp_latents {
        None => None,
        Some(_) if !cfg.warp_injection => {
            bail!(Incompatible, "warp latents supplied but the model has warp injection disabled")
        }
        Some(w) => Some(warp_tokens(cfg, w)?),
    };
    Ok(Prepared {
        tokens,
        warp_tokens,
        cond: Mat::from_vec(1, cfg.cond_dim, pack.cond_embed.vector.clone()),
        time: time_features(t),
    })
}

fn warp_tokens(cfg: &DenoiserConfig, warp: &LatentClip) -> Result<Mat> {
    if warp.len() != cfg.num_frames {
        bail!(ShapeMismatch, "warp clip has {} latents, model expects {}", warp.len(), cfg.num_frames);
    }
    for l in &warp.latents {
        check_latent(cfg, l, "warp latent")?;
    }
    let closures: Vec<Box<dyn Fn(usize, usize, usize) -> f64 + '_>> = warp
        .latents
        .iter()
        .map(|l| Box::new(move |y: usize, x: usize, ch: usize| l.at(y, x, ch)) as Box<dyn Fn(usize, usize, usize) -> f64>)
        .collect();
    let refs: Vec<&dyn Fn(usize, usize, usize) -> f64> = closures.iter().map(|b| b.as_ref()).collect();
    Ok(patchify(cfg, &refs, cfg.latent_c))
}

/// Flat index map from token-layout output to `K × (h·w·c)` latent layout.
fn unpatchify_index(cfg: &DenoiserConfig) -> Vec<usize> {
    let (p, c) = (cfg.token_patch, cfg.latent_c);
    let (_, gw) = cfg.grid();
    let per = cfg.tokens_per_frame();
    let out_dim = cfg.output_dim();
    let mut idx = Vec::with_capacity(cfg.num_frames * cfg.latent_h * cfg.latent_w * c);
    for k in 0..cfg.num_frames {
        for y in 0..cfg.latent_h {
            for x in 0..cfg.latent_w {
                let token = k * per + (y / p) * gw + x / p;
                let base = token * out_dim + ((y % p) * p + x % p) * c;
                idx.extend(base..base + c);
            }
        }
    }
    idx
}

fn build_graph(tape: &mut Tape, vars: &[Var], cfg: &DenoiserConfig, prep: Prepared) -> Var {
    let lay = Layout::new(cfg);
    let n = cfg.num_tokens();
    let per = cfg.tokens_per_frame();

    let tokens = tape.constant(prep.tokens);
    let mut x = tape.matmul(tokens, vars[lay.embed_w]);
    x = tape.add_row(x, vars[lay.embed_b]);
    let frame_of: Rc<Vec<usize>> = Rc::new((0..n).map(|i| i / per).collect());
    let space_of: Rc<Vec<usize>> = Rc::new((0..n).map(|i| i % per).collect());
    let pf = tape.gather_rows(vars[lay.pos_frame], frame_of);
    let ps = tape.gather_rows(vars[lay.pos_space], space_of);
    x = tape.add(x, pf);
    x = tape.add(x, ps);

    let tf = tape.constant(prep.time);
    let mut te = tape.matmul(tf, vars[lay.time_w1]);
    te = tape.add(te, vars[lay.time_b1]);
    te = tape.silu(te);
    te = tape.matmul(te, vars[lay.time_w2]);
    te = tape.add(te, vars[lay.time_b2]);
    let cv = tape.constant(prep.cond);
    let mut ce = tape.matmul(cv, vars[lay.cond_w]);
    ce = tape.add(ce, vars[lay.cond_b]);
    let global = tape.add(te, ce);
    x = tape.add_row(x, global);

    let warp_feats = match (prep.warp_tokens, lay.warp_w) {
        (Some(w), Some(ww)) => {
            let wt = tape.constant(w);
            Some(tape.matmul(wt, vars[ww]))
        }
        _ => None,
    };

    let heads = cfg.num_heads;
    let dh = cfg.token_dim / heads;
    let att_scale = 1.0 / (dh as f64).sqrt();
    for b in &lay.blocks {
        if let (Some(f), Some(g)) = (warp_feats, b.gate) {
            let inj = tape.scale_by(f, vars[g]);
            x = tape.add(x, inj);
        }
        let h = tape.layer_norm(x);
        let mut q = tape.matmul(h, vars[b.wq]);
        q = tape.add_row(q, vars[b.bq]);
        let mut k = tape.matmul(h, vars[b.wk]);
        k = tape.add_row(k, vars[b.bk]);
        let mut v = tape.matmul(h, vars[b.wv]);
        v = tape.add_row(v, vars[b.bv]);
        let outs: Vec<Var> = (0..heads)
            .map(|i| {
                let qh = tape.slice_cols(q, i * dh, dh);
                let kh = tape.slice_cols(k, i * dh, dh);
                let vh = tape.slice_cols(v, i * dh, dh);
                let s = tape.matmul_t(qh, kh);
                let s = tape.scale(s, att_scale);
                let a = tape.softmax_rows(s);
                tape.matmul(a, vh)
            })
            .collect();
        let o = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        let mut o = tape.matmul(o, vars[b.wo]);
        o = tape.add_row(o, vars[b.bo]);
        x = tape.add(x, o);

        let h = tape.layer_norm(x);
        let mut m = tape.matmul(h, vars[b.w1]);
        m = tape.add_row(m, vars[b.b1]);
        m = tape.silu(m);
        m = tape.matmul(m, vars[b.w2]);
        m = tape.add_row(m, vars[b.b2]);
        x = tape.add(x, m);
    }
    let h = tape.layer_norm(x);
    let mut out = tape.matmul(h, vars[lay.head_w]);
    out = tape.add_row(out, vars[lay.head_b]);
    let (lh, lw, lc) = cfg.latent_shape();
    tape.gather(out, Rc::new(unpatchify_index(cfg)), cfg.num_frames, lh * lw * lc)
}

fn rows_to_clip(cfg: &DenoiserConfig, m: &Mat, frame_indices: &[usize]) -> LatentClip {
    let (h, w, c) = cfg.latent_shape();
    LatentClip {
        latents: (0..m.rows).map(|k| Latent { h, w, c, data: m.row(k).to_vec() }).collect(),
        frame_indices: frame_indices.to_vec(),
    }
}

/// Clean-clip values in the `K × (h·w·c)` row layout produced on the tape.
pub fn clip_to_rows(clip: &LatentClip) -> Mat {
    let cols = clip.latents.first().map_or(0, Latent::len);
    Mat::from_vec(clip.len(), cols, clip.values().collect())
}

/// Differentiable forward pass. The returned node is `K × (h·w·c)`.
pub fn forward_on_tape(
    tape: &mut Tape,
    vars: &[Var],
    params: &DenoiserParams,
    noisy: &LatentClip,
    t: usize,
    pack: &ConditioningPack,
) -> Result<Var> {
    let prep = prepare(&params.config, noisy, t, pack)?;
    Ok(build_graph(tape, vars, &params.config, prep))
}

/// x₀-prediction for a noisy clip.
pub fn forward(params: &DenoiserParams, noisy: &LatentClip, t: usize, pack: &ConditioningPack) -> Result<LatentClip> {
    let prep = prepare(&params.config, noisy, t, pack)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors.iter().map(|m| tape.constant(m.clone())).collect();
    let out = build_graph(&mut tape, &vars, &params.config, prep);
    Ok(rows_to_clip(&params.config, tape.value(out), &noisy.frame_indices))
}

impl Denoise for DenoiserParams {
    fn predict(&self, noisy: &LatentClip, t: usize, pack: &ConditioningPack) -> Result<LatentClip> {
        forward(self, noisy, t, pack)
    }
}

/// Token features of the warp stream, `num_tokens × token_dim`.
pub fn embed_warp(params: &DenoiserParams, warp_latents: &LatentClip) -> Result<Mat> {
    let cfg = &params.config;
    if !cfg.warp_injection {
        bail!(Incompatible, "warp injection is disabled for this model");
    }
    let tokens = warp_tokens(cfg, warp_latents)?;
    let w = params.tensor("warp.w").ok_or_else(|| Error::Incompatible("missing warp.w".into()))?;
    Ok(tokens.matmul(w))
}

/// Exact reverse-mode gradients of the scalar built by `loss` with respect to
/// every parameter tensor. Returns the loss value and the gradients.
pub fn gradients<F>(params: &DenoiserParams, loss: F) -> Result<(f64, ParamGrads)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors.iter().map(|m| tape.param(m.clone())).collect();
    let l = loss(&mut tape, &vars)?;
    let value = tape.value(l);
    if value.shape() != (1, 1) {
        bail!(ShapeMismatch, "loss must be a scalar, got {:?}", value.shape());
    }
    let value = value.data[0];
    if !value.is_finite() {
        bail!(NonFinite, "loss evaluated to {value}");
    }
    let mut g = tape.backward(l);
    let grads = vars
        .iter()
        .zip(&params.tensors)
        .map(|(v, m)| g.take(*v).unwrap_or_else(|| Mat::zeros(m.rows, m.cols)))
        .collect();
    Ok((value, grads))
}
