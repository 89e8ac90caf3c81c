use criterion::{black_box, criterion_group, criterion_main, Criterion};
use hierwm_bench::{desk_config, random_clip, random_condition, random_features, random_frame};
use hierwm_core::denoiser::{forward, init_params};
use hierwm_core::evalmetrics::{frechet_distance, FeatureExtractor};
use hierwm_core::losses::highpass;
use hierwm_core::trajwarp::{inpaint, warp_frame, CameraPose, Intrinsics, DEFAULT_DEPTH};
use hierwm_core::ConditioningPack;

fn denoiser(c: &mut Criterion) {
    let cfg = desk_config();
    let params = init_params(&cfg, 0).unwrap();
    let clip = random_clip(cfg.num_frames, cfg.latent_shape(), 1);
    let pack = ConditioningPack::new(random_condition(cfg.cond_dim, 2), clip.latents[0].clone());
    c.bench_function("denoiser_forward_13f", |b| b.iter(|| forward(&params, black_box(&clip), 500, &pack).unwrap()));
}

fn losses(c: &mut Criterion) {
    let clip = random_clip(1, (8, 8, 48), 3);
    c.bench_function("highpass_8x8x48", |b| b.iter(|| highpass(black_box(&clip.latents[0]), 0.25).unwrap()));
}

fn warping(c: &mut Criterion) {
    let frame = random_frame(64, 64, 4);
    let intr = Intrinsics::for_image(64, 64);
    let mut pose = CameraPose::yaw(0.1);
    pose.t = [0.3, 0.0, -1.0];
    c.bench_function("warp_frame_64", |b| b.iter(|| warp_frame(black_box(&frame), &pose, &intr, DEFAULT_DEPTH).unwrap()));
    let (warped, mask) = warp_frame(&frame, &pose, &intr, DEFAULT_DEPTH).unwrap();
    c.bench_function("inpaint_64", |b| b.iter(|| inpaint(black_box(&warped), &mask).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let a = random_features(64, 128, 5);
    let b_ = random_features(64, 128, 6);
    c.bench_function("frechet_128d", |b| b.iter(|| frechet_distance(black_box(&a), &b_).unwrap()));
    let ex = FeatureExtractor::new(0);
    let frame = random_frame(32, 32, 7);
    c.bench_function("frame_features_32", |b| b.iter(|| ex.frame_features(black_box(&frame))));
}

criterion_group!(benches, denoiser, losses, warping, metrics);
criterion_main!(benches);
