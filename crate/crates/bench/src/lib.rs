//! Seeded inputs shared by the benchmarks.

use hierwm_core::codec::Latent;
use hierwm_core::{ConditionEmbedding, DenoiserConfig, Frame, LatentClip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 32×32 frames through a 4×4 codec, 13 frames per clip.
pub fn desk_config() -> DenoiserConfig {
    DenoiserConfig::new(13, (8, 8, 48))
}

pub fn random_frame(height: usize, width: usize, seed: u64) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = Frame::new(height, width);
    f.data.iter_mut().for_each(|v| *v = rng.gen());
    f
}

pub fn random_latent(shape: (usize, usize, usize), rng: &mut impl Rng) -> Latent {
    let mut l = Latent::zeros(shape.0, shape.1, shape.2);
    l.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    l
}

pub fn random_clip(frames: usize, shape: (usize, usize, usize), seed: u64) -> LatentClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentClip::from_latents((0..frames).map(|_| random_latent(shape, &mut rng)).collect()).expect("nonempty clip")
}

pub fn random_condition(len: usize, seed: u64) -> ConditionEmbedding {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ConditionEmbedding { vector: (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect() }
}

pub fn random_features(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..dim).map(|_| rng.gen()).collect()).collect()
}
