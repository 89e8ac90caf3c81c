//! `hierwm` command line: data generation, training, distillation, rollout,
//! warping, evaluation and timing reports.
//!
//! Every subcommand reads the run configuration (`--config`, then `HIERWM_`
//! overrides); explicit flags win over configuration values. Paths not given
//! on the command line default to fixed names under `output_dir`.

pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hierwm_core::evalmetrics::{boundary_jump, extract_features, frechet_distance, interior_joints, timing_report};
use hierwm_core::io::{decode_ppm, load_dataset, load_episode, read_video, save_episode, write_video};
use hierwm_core::rollout::{autoregressive_rollout, chain_len, hierarchical_rollout, plan_rollout, trajectory_rollout, RolloutOutput};
use hierwm_core::trainer::{train_coarse, train_fine, train_fine_from, write_loss_csv, TrainOutcome};
use hierwm_core::trajwarp::{warp_sequence, Intrinsics, DEFAULT_DEPTH};
use hierwm_core::{
    distill, load_checkpoint, save_checkpoint, toyworld, Codec, FeatureExtractor, Frame, SamplerOptions, TimingReport,
    TrajectorySpec,
};
use serde::{Deserialize, Serialize};

pub use config::RunConfig;

pub const METRICS_VERSION: u32 = 1;
pub const TIMING_FILE: &str = "timing.json";
pub const PLAN_FILE: &str = "plan.json";

#[derive(Parser, Debug)]
#[command(name = "hierwm", version, about = "Hierarchical coarse/fine diffusion world model")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Hier,
    Ar,
    Traj,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render toy-world episodes into numbered frame directories.
    GenData {
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the coarse denoiser on strided clips.
    TrainCoarse {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the fine denoiser on consecutive clips.
    TrainFine {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Condition on warped copies of the first frame.
        #[arg(long)]
        warp: bool,
        /// Start from an existing fine checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Align the coarse model's one-step predictions with the frozen fine model.
    Distill {
        #[arg(long)]
        coarse: Option<PathBuf>,
        #[arg(long)]
        fine: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a video from an episode's first frame.
    Rollout {
        #[arg(long, value_enum, default_value_t = Mode::Hier)]
        mode: Mode,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        coarse_ckpt: Option<PathBuf>,
        #[arg(long)]
        fine_ckpt: Option<PathBuf>,
        /// Episode directory supplying the first frame and condition.
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        sampler_steps: Option<usize>,
        /// `x,z;x,z;…` ground-plane waypoints for `--mode traj`.
        #[arg(long)]
        waypoints: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Warp one frame along a trajectory and inpaint the holes.
    Warp {
        #[arg(long)]
        frame: PathBuf,
        #[arg(long)]
        waypoints: String,
        #[arg(long, default_value_t = TrajectorySpec::DEFAULT_FRAMES)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Feature-distribution distance and boundary jump of generated videos.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a hierarchical timing file against a baseline timing file.
    Report {
        #[arg(long)]
        hier: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Written next to rollout frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub mode: Mode,
    pub frames: usize,
    pub seed: u64,
    pub workers: usize,
    pub sampler_steps: usize,
    pub coarse_indices: Vec<usize>,
    pub plan: Option<hierwm_core::RolloutPlan>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub version: u32,
    pub fvd_proxy: f64,
    /// Mean over generated videos with at least one interior joint.
    pub boundary_jump: Option<f64>,
    pub num_real: usize,
    pub num_generated: usize,
    pub frames: usize,
    pub extractor_seed: u64,
}

/// Parses and runs `argv`; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let cfg = RunConfig::from_env(cli.config.as_deref())?;
    let out_dir = cfg.output_dir.clone();
    let default = |p: Option<PathBuf>, name: &str| p.unwrap_or_else(|| out_dir.join(name));
    match cli.command {
        Command::GenData { episodes, length, seed, out } => {
            let mut world = cfg.world.clone();
            if let Some(s) = seed {
                world.seed = s;
            }
            gen_data(&world, episodes.unwrap_or(cfg.data.episodes), length.unwrap_or(cfg.data.length), &default(out, "data"))
        }
        Command::TrainCoarse { data, out, steps, seed } => {
            let mut tc = cfg.train.clone();
            tc.steps = steps.unwrap_or(tc.steps);
            tc.seed = seed.unwrap_or(tc.seed);
            let dataset = load_dataset(&default(data, "data"))?;
            let outcome = train_coarse(&dataset, &tc, &cfg.schedule.build()?)?;
            save_training(&outcome, &default(out, "coarse.ckpt"))
        }
        Command::TrainFine { data, out, steps, seed, warp, init } => {
            let mut tc = cfg.train.clone();
            tc.steps = steps.unwrap_or(tc.steps);
            tc.seed = seed.unwrap_or(tc.seed);
            tc.warp_injection |= warp;
            let dataset = load_dataset(&default(data, "data"))?;
            let sched = cfg.schedule.build()?;
            let outcome = match init {
                Some(p) => train_fine_from(&load_checkpoint(&p)?, &dataset, &tc, &sched)?,
                None => train_fine(&dataset, &tc, &sched)?,
            };
            let name = if tc.warp_injection { "fine_warp.ckpt" } else { "fine.ckpt" };
            save_training(&outcome, &default(out, name))
        }
        Command::Distill { coarse, fine, data, out, steps, seed } => {
            let mut dc = cfg.distill.clone();
            dc.steps = steps.unwrap_or(dc.steps);
            dc.seed = seed.unwrap_or(dc.seed);
            let coarse = load_checkpoint(&default(coarse, "coarse.ckpt"))?;
            let fine = load_checkpoint(&default(fine, "fine.ckpt"))?;
            let dataset = load_dataset(&default(data, "data"))?;
            let outcome = distill::run_distillation(&coarse, &fine, &dataset, &dc, &cfg.schedule.build()?)?;
            let out = default(out, "distilled.ckpt");
            save_checkpoint(&out, &outcome.checkpoint)?;
            write_loss_csv(&loss_csv_path(&out), &outcome.trace)?;
            Ok(())
        }
        Command::Rollout { mode, frames, coarse_ckpt, fine_ckpt, episode, seed, workers, sampler_steps, waypoints, out } => {
            let opts = SamplerOptions {
                sampler_steps: sampler_steps.unwrap_or(cfg.rollout.sampler_steps),
                seed: seed.unwrap_or(cfg.rollout.seed),
                workers: workers.unwrap_or(cfg.rollout.workers),
            };
            let frames = frames.unwrap_or(cfg.rollout.frames);
            let default_fine = if mode == Mode::Traj { "fine_warp.ckpt" } else { "fine.ckpt" };
            let req = RolloutRequest {
                mode,
                frames,
                coarse: default(coarse_ckpt, "distilled.ckpt"),
                fine: default(fine_ckpt, default_fine),
                episode,
                waypoints,
                opts,
            };
            let out = default(out, &format!("rollout_{}", mode_name(mode)));
            rollout(&cfg, &req, &out).map(|_| ())
        }
        Command::Warp { frame, waypoints, frames, out } => {
            let first = decode_ppm(&std::fs::read(&frame).with_context(|| format!("reading {}", frame.display()))?)?;
            let spec = TrajectorySpec::new(parse_waypoints(&waypoints)?, frames)?;
            let warped = warp_sequence(&first, &spec, &Intrinsics::for_image(first.width, first.height), DEFAULT_DEPTH)?;
            write_video(&out, &warped.into_iter().map(|w| w.frame).collect::<Vec<_>>())?;
            Ok(())
        }
        Command::Eval { real, generated, out } => {
            let metrics = evaluate(&real, &generated, cfg.eval.extractor_seed)?;
            write_json(&default(out, "metrics.json"), &metrics)
        }
        Command::Report { hier, baseline, out } => {
            let hier: TimingReport = read_json(&hier)?;
            let base: TimingReport = read_json(&baseline)?;
            let report = timing_report(&hier.phases, hier.frames, Some(base.total_seconds))?;
            let text = serde_json::to_string_pretty(&report)?;
            println!("{text}");
            if let Some(p) = out {
                write_json(&p, &report)?;
            }
            Ok(())
        }
    }
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Hier => "hier",
        Mode::Ar => "ar",
        Mode::Traj => "traj",
    }
}

/// Episode directories are named `ep_000`, `ep_001`, ….
pub fn gen_data(world: &toyworld::WorldParams, episodes: usize, length: usize, out: &Path) -> Result<()> {
    ensure!(episodes > 0, "--episodes must be at least 1");
    for (i, ep) in toyworld::gen_dataset(world, episodes, length)?.iter().enumerate() {
        save_episode(&out.join(format!("ep_{i:03}")), ep)?;
    }
    Ok(())
}

/// `model.ckpt` gets its loss trace at `model.loss.csv`.
pub fn loss_csv_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("loss.csv")
}

fn save_training(outcome: &TrainOutcome, out: &Path) -> Result<()> {
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_checkpoint(out, &outcome.checkpoint)?;
    write_loss_csv(&loss_csv_path(out), &outcome.trace)?;
    Ok(())
}

pub fn parse_waypoints(s: &str) -> Result<Vec<(f64, f64)>> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (x, z) = p.split_once(',').with_context(|| format!("waypoint `{p}` is not `x,z`"))?;
            Ok((x.trim().parse().with_context(|| format!("waypoint `{p}`"))?, z.trim().parse().with_context(|| format!("waypoint `{p}`"))?))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct RolloutRequest {
    pub mode: Mode,
    pub frames: usize,
    pub coarse: PathBuf,
    pub fine: PathBuf,
    pub episode: PathBuf,
    pub waypoints: Option<String>,
    pub opts: SamplerOptions,
}

/// Writes frames, `timing.json` and `plan.json` under `out`.
pub fn rollout(cfg: &RunConfig, req: &RolloutRequest, out: &Path) -> Result<RolloutOutput> {
    let episode = load_episode(&req.episode)?;
    let first = episode.frames.first().context("episode has no frames")?;
    let sched = cfg.schedule.build()?;
    let codec = Codec::new(cfg.train.codec_patch)?;
    let fine = load_checkpoint(&req.fine).with_context(|| format!("loading {}", req.fine.display()))?;
    let n = req.frames;
    ensure!(n >= 2, "--frames must be at least 2");
    let (mut output, plan) = match req.mode {
        Mode::Hier => {
            let coarse = load_checkpoint(&req.coarse).with_context(|| format!("loading {}", req.coarse.display()))?;
            let k_c = coarse.config().num_frames;
            let m = fine.config().num_frames.checked_sub(2).context("fine model needs at least 2 frames")?;
            let plan = plan_rollout(n, k_c, m)?;
            let o = hierarchical_rollout(&coarse.params, &fine.params, first, &episode.descriptor, &plan, &req.opts, &sched, &codec)?;
            (o, Some(plan))
        }
        Mode::Ar => {
            let k = fine.config().num_frames;
            ensure!(k >= 2, "fine model needs at least 2 frames");
            let mut rollouts = 1;
            while chain_len(k, rollouts) < n {
                rollouts += 1;
            }
            let params = if fine.params.config.warp_injection { fine.params.without_warp() } else { fine.params.clone() };
            (autoregressive_rollout(&params, first, &episode.descriptor, rollouts, &req.opts, &sched, &codec)?, None)
        }
        Mode::Traj => {
            let wp = req.waypoints.as_deref().context("--mode traj needs --waypoints")?;
            let spec = TrajectorySpec::new(parse_waypoints(wp)?, n)?;
            (trajectory_rollout(&fine.params, first, &spec, &episode.descriptor, &req.opts, &sched, &codec)?, None)
        }
    };
    truncate(&mut output, n)?;
    write_video(out, &output.frames)?;
    let report = timing_report(&output.timings, output.frames.len(), None)?;
    write_json(&out.join(TIMING_FILE), &report)?;
    let record = RolloutRecord {
        mode: req.mode,
        frames: output.frames.len(),
        seed: req.opts.seed,
        workers: req.opts.workers,
        sampler_steps: req.opts.sampler_steps,
        coarse_indices: output.coarse_indices.clone(),
        plan,
    };
    write_json(&out.join(PLAN_FILE), &record)?;
    Ok(output)
}

fn truncate(output: &mut RolloutOutput, n: usize) -> Result<()> {
    if output.frames.len() < n {
        bail!("rollout produced {} frames, {n} requested", output.frames.len());
    }
    output.frames.truncate(n);
    output.latents = output.latents.slice(0, n);
    output.coarse_indices.retain(|&i| i < n);
    Ok(())
}

/// Frame directories under `root`, or `root` itself when it holds frames directly.
pub fn video_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let has_frames = |d: &Path| -> Result<bool> {
        Ok(std::fs::read_dir(d)?.filter_map(|e| e.ok()).any(|e| e.path().extension().is_some_and(|x| x == "ppm")))
    };
    if has_frames(root).with_context(|| format!("reading {}", root.display()))? {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let p = entry?.path();
        if p.is_dir() && has_frames(&p)? {
            dirs.push(p);
        }
    }
    ensure!(!dirs.is_empty(), "{} holds no videos", root.display());
    dirs.sort();
    Ok(dirs)
}

/// Real videos are cut to the shortest generated length before feature extraction.
pub fn evaluate(real_root: &Path, generated_root: &Path, extractor_seed: u64) -> Result<Metrics> {
    let generated: Vec<(PathBuf, Vec<Frame>)> =
        video_dirs(generated_root)?.into_iter().map(|d| read_video(&d).map(|v| (d, v))).collect::<hierwm_core::Result<_>>()?;
    let frames = generated.iter().map(|(_, v)| v.len()).min().context("no generated videos")?;
    let real: Vec<Vec<Frame>> = video_dirs(real_root)?
        .iter()
        .map(|d| read_video(d).map(|mut v| {
            v.truncate(frames);
            v
        }))
        .collect::<hierwm_core::Result<_>>()?;
    let extractor = FeatureExtractor::new(extractor_seed);
    let gen_videos: Vec<Vec<Frame>> = generated.iter().map(|(_, v)| v[..frames].to_vec()).collect();
    let fvd = frechet_distance(&extract_features(&real, &extractor)?, &extract_features(&gen_videos, &extractor)?)?;
    let mut jumps = Vec::new();
    for (dir, video) in &generated {
        let plan_path = dir.join(PLAN_FILE);
        if !plan_path.is_file() {
            continue;
        }
        let record: RolloutRecord = read_json(&plan_path)?;
        let joints = interior_joints(&record.coarse_indices, video.len());
        if !joints.is_empty() {
            jumps.push(boundary_jump(video, &joints, &extractor)?);
        }
    }
    let boundary_jump = (!jumps.is_empty()).then(|| jumps.iter().sum::<f64>() / jumps.len() as f64);
    Ok(Metrics {
        version: METRICS_VERSION,
        fvd_proxy: fvd,
        boundary_jump,
        num_real: real.len(),
        num_generated: generated.len(),
        frames,
        extractor_seed,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn waypoint_parsing() {
        assert_eq!(parse_waypoints("0,0; 0.5,2;1,4").unwrap(), vec![(0.0, 0.0), (0.5, 2.0), (1.0, 4.0)]);
        assert!(parse_waypoints("0,0;1").is_err());
        assert!(parse_waypoints("a,b").is_err());
    }

    #[test]
    fn usage_errors_exit_nonzero() {
        assert_ne!(run(["hierwm", "fly"]), 0);
        assert_ne!(run(["hierwm", "gen-data", "--bogus", "1"]), 0);
        assert_ne!(run(["hierwm"]), 0);
    }

    #[test]
    fn loss_csv_sits_next_to_checkpoint() {
        assert_eq!(loss_csv_path(Path::new("a/coarse.ckpt")), PathBuf::from("a/coarse.loss.csv"));
    }
}
