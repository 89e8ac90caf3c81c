//! Procedural toy driving world.
//!
//! A pinhole camera rides along a straight road and ray-casts the ground plane
//! (road with dashed lane markings, checkered verges), draws parallax
//! silhouette layers above the horizon and box obstacles driving ahead.
//! Episodes are pure functions of `(WorldParams, length)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Frame;
use crate::error::{bail, Result};
use crate::trajwarp::{CameraPose, Intrinsics};

pub const DESCRIPTOR_LEN: usize = 32;
pub const FRAME_PERIOD: f64 = 0.1;

const CAMERA_HEIGHT: f64 = 1.5;
const ROAD_HALF_WIDTH: f64 = 4.0;
const OBSTACLE_WRAP: f64 = 48.0;
const OBSTACLE_NEAR: f64 = 2.5;
const MAX_OBSTACLES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldParams {
    pub image_height: usize,
    pub image_width: usize,
    pub num_layers: usize,
    pub num_obstacles: usize,
    /// Ego speed bounds in world units per frame.
    pub ego_speed_range: (f64, f64),
    pub seed: u64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self { image_height: 64, image_width: 64, num_layers: 2, num_obstacles: 3, ego_speed_range: (0.3, 0.6), seed: 0 }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<()> {
        if self.image_height == 0 || self.image_width == 0 {
            bail!(InvalidArgument, "image size must be positive, got {}x{}", self.image_height, self.image_width);
        }
        let (lo, hi) = self.ego_speed_range;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            bail!(InvalidArgument, "invalid ego speed range ({lo}, {hi})");
        }
        if self.num_obstacles > MAX_OBSTACLES {
            bail!(InvalidArgument, "at most {MAX_OBSTACLES} obstacles supported, got {}", self.num_obstacles);
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Conditioning vector standing in for a text prompt embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionEmbedding {
    pub vector: Vec<f64>,
}

impl ConditionEmbedding {
    pub fn len(&self) -> usize {
        self.vector.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vector.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Weather {
    Clear,
    Overcast,
    Dusk,
    Fog,
}

impl Weather {
    fn tint(self) -> [f64; 3] {
        match self {
            Weather::Clear => [0.55, 0.75, 0.95],
            Weather::Overcast => [0.62, 0.64, 0.68],
            Weather::Dusk => [0.85, 0.55, 0.40],
            Weather::Fog => [0.80, 0.82, 0.84],
        }
    }

    fn haze(self) -> f64 {
        match self {
            Weather::Fog => 0.06,
            Weather::Overcast => 0.025,
            _ => 0.012,
        }
    }
}

/// Scene-level parameters summarised by the descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub weather: Weather,
    pub tint: [f64; 3],
    pub num_obstacles: usize,
    pub base_speed: f64,
    pub speed_bucket: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub frames: Vec<Frame>,
    pub poses: Vec<CameraPose>,
    pub descriptor: ConditionEmbedding,
    pub frame_period: f64,
    pub scene: SceneState,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

const SPEED_BUCKETS: usize = 4;

/// Deterministic descriptor: raw scene features followed by fixed sinusoidal
/// projections of them.
pub fn descriptor_of(params: &WorldParams, scene: &SceneState) -> ConditionEmbedding {
    let (lo, hi) = params.ego_speed_range;
    let speed_norm = if hi > lo { (scene.base_speed - lo) / (hi - lo) } else { 0.5 };
    let mut base = vec![
        scene.tint[0],
        scene.tint[1],
        scene.tint[2],
        scene.num_obstacles as f64 / MAX_OBSTACLES as f64,
        speed_norm,
    ];
    base.extend((0..SPEED_BUCKETS).map(|b| if b == scene.speed_bucket { 1.0 } else { 0.0 }));
    base.push(match scene.weather {
        Weather::Clear => 0.0,
        Weather::Overcast => 1.0 / 3.0,
        Weather::Dusk => 2.0 / 3.0,
        Weather::Fog => 1.0,
    });
    let mut vector = base.clone();
    let mut k = 0usize;
    while vector.len() < DESCRIPTOR_LEN {
        // fixed projection weights from a golden-ratio sequence
        let proj: f64 = base
            .iter()
            .enumerate()
            .map(|(j, b)| {
                let w = (((k * base.len() + j) as f64 * 0.618_033_988_749_895).fract() - 0.5) * 4.0;
                w * b
            })
            .sum();
        vector.push(if k.is_multiple_of(2) { proj.sin() } else { proj.cos() });
        k += 1;
    }
    ConditionEmbedding { vector }
}

#[derive(Clone, Debug)]
struct Obstacle {
    lane_x: f64,
    z0: f64,
    speed: f64,
    color: [f64; 3],
}

#[derive(Clone, Debug)]
struct Layer {
    depth: f64,
    amplitude: f64,
    freqs: [f64; 3],
    phases: [f64; 3],
    color: [f64; 3],
}

struct World {
    weather: Weather,
    tint: [f64; 3],
    layers: Vec<Layer>,
    obstacles: Vec<Obstacle>,
    centers: Vec<[f64; 3]>,
    yaws: Vec<f64>,
}

fn sample_world(params: &WorldParams, length: usize) -> (World, SceneState) {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let weather = match rng.gen_range(0..4) {
        0 => Weather::Clear,
        1 => Weather::Overcast,
        2 => Weather::Dusk,
        _ => Weather::Fog,
    };
    let base_tint = weather.tint();
    let tint = base_tint.map(|c| (c + rng.gen_range(-0.04..0.04)).clamp(0.0, 1.0));
    let (lo, hi) = params.ego_speed_range;
    let base_speed = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let speed_bucket = if hi > lo { (((base_speed - lo) / (hi - lo)) * SPEED_BUCKETS as f64).floor() as usize } else { 0 };
    let speed_bucket = speed_bucket.min(SPEED_BUCKETS - 1);

    let layers = (0..params.num_layers)
        .map(|j| Layer {
            depth: 40.0 * 2f64.powi(j as i32),
            amplitude: rng.gen_range(0.06..0.16) / (1.0 + j as f64 * 0.5),
            freqs: [rng.gen_range(1.0..3.0), rng.gen_range(3.0..7.0), rng.gen_range(7.0..13.0)],
            phases: [rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3)],
            color: {
                let g = rng.gen_range(0.25..0.45) + 0.12 * j as f64;
                [g * 0.8, g, g * 0.85]
            },
        })
        .collect();

    let obstacles = (0..params.num_obstacles)
        .map(|_| Obstacle {
            lane_x: if rng.gen_bool(0.5) { -2.0 } else { 2.0 } + rng.gen_range(-0.3..0.3),
            z0: rng.gen_range(6.0..OBSTACLE_WRAP),
            speed: base_speed * rng.gen_range(0.4..0.9),
            color: [rng.gen_range(0.1..0.95), rng.gen_range(0.1..0.6), rng.gen_range(0.1..0.95)],
        })
        .collect();

    // heading wanders sinusoidally; speed oscillates inside the allowed range
    let yaw_amp = rng.gen_range(0.03..0.12);
    let yaw_freq = rng.gen_range(0.01..0.04);
    let yaw_phase = rng.gen_range(0.0..6.3);
    let speed_amp = rng.gen_range(0.0..0.15);
    let speed_freq = rng.gen_range(0.02..0.06);
    let mut centers = Vec::with_capacity(length);
    let mut yaws = Vec::with_capacity(length);
    let mut c = [rng.gen_range(-1.0..1.0), CAMERA_HEIGHT, 0.0];
    for t in 0..length {
        let yaw = yaw_amp * (yaw_freq * t as f64 + yaw_phase).sin() - 0.02 * c[0];
        centers.push(c);
        yaws.push(yaw);
        let speed = (base_speed * (1.0 + speed_amp * (speed_freq * t as f64).sin())).clamp(lo, hi);
        c = [c[0] + speed * yaw.sin(), c[1], c[2] + speed * yaw.cos()];
    }

    let scene = SceneState { weather, tint, num_obstacles: params.num_obstacles, base_speed, speed_bucket };
    (World { weather, tint, layers, obstacles, centers, yaws }, scene)
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn render(world: &World, params: &WorldParams, t: usize) -> Frame {
    let (h, w) = (params.image_height, params.image_width);
    let intr = Intrinsics::for_image(w, h);
    let c = world.centers[t];
    let yaw = world.yaws[t];
    let (s, co) = yaw.sin_cos();
    let fwd = [s, 0.0, co];
    let right = [co, 0.0, -s];
    let haze = world.weather.haze();
    let mut frame = Frame::new(h, w);

    for v in 0..h {
        let dv = v as f64 - intr.cy;
        for u in 0..w {
            let du = (u as f64 - intr.cx) / intr.fx;
            let rgb = if dv > 0.0 {
                // ground plane hit along this pixel's ray
                let depth = CAMERA_HEIGHT * intr.fy / dv;
                let lateral = du * depth;
                let x = c[0] + depth * fwd[0] + lateral * right[0];
                let z = c[2] + depth * fwd[2] + lateral * right[2];
                let base = if x.abs() < ROAD_HALF_WIDTH {
                    let dash = x.abs() < 0.18 && z.rem_euclid(6.0) < 3.0;
                    let edge = (x.abs() - (ROAD_HALF_WIDTH - 0.25)).abs() < 0.12;
                    if dash || edge {
                        [0.92, 0.9, 0.8]
                    } else {
                        let g = 0.32 + 0.04 * ((z / 9.0).floor().rem_euclid(2.0));
                        [g, g, g * 1.05]
                    }
                } else {
                    let check = ((z / 5.0).floor() + (x / 5.0).floor()).rem_euclid(2.0);
                    [0.22 + 0.08 * check, 0.45 + 0.1 * check, 0.18]
                };
                let fog = 1.0 - (-haze * depth).exp();
                mix(base, world.tint, fog)
            } else {
                let elev = -dv / intr.fy;
                let mut sky = mix(world.tint, [1.0, 1.0, 1.0], (0.4 - elev).clamp(0.0, 0.4));
                // far layers first so nearer silhouettes overwrite them
                for layer in world.layers.iter().rev() {
                    let azimuth = yaw + du.atan();
                    let scroll = (c[0] + 0.35 * c[2]) / layer.depth;
                    let a = azimuth + scroll;
                    let ridge = layer.amplitude
                        * (0.55
                            + 0.25 * (layer.freqs[0] * a + layer.phases[0]).sin()
                            + 0.12 * (layer.freqs[1] * a + layer.phases[1]).sin()
                            + 0.08 * (layer.freqs[2] * a + layer.phases[2]).sin());
                    if elev < ridge {
                        sky = mix(layer.color, world.tint, (haze * layer.depth * 0.3).min(0.7));
                    }
                }
                sky
            };
            frame.set_pixel(v, u, rgb);
        }
    }

    // obstacles, painted far to near
    let mut visible: Vec<(f64, f64, [f64; 3])> = world
        .obstacles
        .iter()
        .filter_map(|o| {
            let rel = (o.z0 + o.speed * t as f64 - c[2]).rem_euclid(OBSTACLE_WRAP) + OBSTACLE_NEAR;
            let d = [o.lane_x - c[0], 0.0, rel];
            let zc = d[0] * fwd[0] + d[2] * fwd[2];
            let xc = d[0] * right[0] + d[2] * right[2];
            (zc > 1.0).then_some((zc, xc, o.color))
        })
        .collect();
    visible.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (zc, xc, color) in visible {
        let half_w = 0.9;
        let height = 1.4;
        let u0 = intr.cx + intr.fx * (xc - half_w) / zc;
        let u1 = intr.cx + intr.fx * (xc + half_w) / zc;
        let v1 = intr.cy + intr.fy * CAMERA_HEIGHT / zc;
        let v0 = intr.cy + intr.fy * (CAMERA_HEIGHT - height) / zc;
        let fog = 1.0 - (-haze * zc).exp();
        let shaded = mix(color, world.tint, fog);
        let roof = mix(shaded, [1.0; 3], 0.3);
        let (ua, ub) = (u0.round().max(0.0) as i64, u1.round().min(w as f64) as i64);
        let (va, vb) = (v0.round().max(0.0) as i64, v1.round().min(h as f64) as i64);
        for v in va..vb {
            let top = (v - va) as f64 <= 0.2 * (vb - va) as f64;
            for u in ua..ub {
                frame.set_pixel(v as usize, u as usize, if top { roof } else { shaded });
            }
        }
    }
    for p in frame.data.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
    frame
}

/// Generates an episode of `length` frames; deterministic in `(params, length)`.
pub fn gen_episode(params: &WorldParams, length: usize) -> Result<Episode> {
    params.validate()?;
    if length == 0 {
        bail!(InvalidArgument, "episode length must be at least 1");
    }
    let (world, scene) = sample_world(params, length);
    let frames = (0..length).map(|t| render(&world, params, t)).collect();
    let poses = (0..length)
        .map(|t| CameraPose::relative(world.centers[0], world.yaws[0], world.centers[t], world.yaws[t]))
        .collect();
    let descriptor = descriptor_of(params, &scene);
    Ok(Episode { frames, poses, descriptor, frame_period: FRAME_PERIOD, scene })
}

/// Episodes for seeds `params.seed + i`.
pub fn gen_dataset(params: &WorldParams, episodes: usize, length: usize) -> Result<Vec<Episode>> {
    (0..episodes as u64).map(|i| gen_episode(&params.with_seed(params.seed.wrapping_add(i)), length)).collect()
}

/// Seeded disjoint split; `train` gets `round(ratio · n)` episodes.
pub fn split_dataset<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    use rand::seq::SliceRandom;
    if items.is_empty() {
        bail!(InvalidArgument, "cannot split an empty dataset");
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        bail!(InvalidArgument, "split ratio must lie in (0, 1), got {ratio}");
    }
    let n_train = (ratio * items.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = order[..n_train].iter().map(|&i| items[i].clone()).collect();
    let val = order[n_train..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> WorldParams {
        WorldParams { image_height: 32, image_width: 32, seed, ..WorldParams::default() }
    }

    #[test]
    fn episode_lengths() {
        let ep = gen_episode(&WorldParams { seed: 7, ..WorldParams::default() }, 145).unwrap();
        assert_eq!(ep.frames.len(), 145);
        assert_eq!(ep.poses.len(), 145);
        let one = gen_episode(&small(7), 1).unwrap();
        assert_eq!(one.frames.len(), 1);
        let id = CameraPose::identity();
        for i in 0..3 {
            assert_eq!(one.poses[0].t[i], 0.0);
            for j in 0..3 {
                assert!((one.poses[0].r[i][j] - id.r[i][j]).abs() < 1e-12);
            }
        }
        assert_eq!(one.descriptor.len(), DESCRIPTOR_LEN);
        assert!(gen_episode(&small(7), 0).is_err());
    }

    #[test]
    fn deterministic_frames() {
        let a = gen_episode(&small(7), 20).unwrap();
        let b = gen_episode(&small(7), 20).unwrap();
        assert_eq!(a.frames[13], b.frames[13]);
        let c = gen_episode(&small(8), 20).unwrap();
        assert_ne!(a.frames[13], c.frames[13]);
    }

    #[test]
    fn pixels_in_range_and_motion_bounded() {
        let p = small(3);
        let ep = gen_episode(&p, 60).unwrap();
        assert!(ep.frames.iter().all(|f| f.data.iter().all(|v| (0.0..=1.0).contains(v))));
        for w in ep.poses.windows(2) {
            let (a, b) = (w[0].center(), w[1].center());
            let step = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            assert!(step <= p.ego_speed_range.1 + 1e-9, "step {step}");
            assert!(w[1].orthonormality_error() < 1e-9);
        }
    }

    #[test]
    fn descriptor_tracks_obstacles() {
        let p = small(1);
        let (_, scene) = sample_world(&p, 1);
        let a = descriptor_of(&p, &scene);
        assert_eq!(a, descriptor_of(&p, &scene));
        let other = SceneState { num_obstacles: scene.num_obstacles + 1, ..scene.clone() };
        let b = descriptor_of(&p, &other);
        assert!(a.vector.iter().zip(&b.vector).any(|(x, y)| x != y));
        assert!(a.vector.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn split_sizes() {
        let items: Vec<usize> = (0..10).collect();
        let (tr, va) = split_dataset(&items, 0.8, 3).unwrap();
        assert_eq!((tr.len(), va.len()), (8, 2));
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert_eq!(split_dataset(&items, 0.8, 3).unwrap(), (tr, va));
        let (a, b) = split_dataset(&[1, 2], 0.5, 0).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
        assert!(split_dataset::<u8>(&[], 0.5, 0).is_err());
    }
}
