use std::path::Path;

use hierwm_cli::{read_json, run, RolloutRecord, PLAN_FILE, TIMING_FILE};
use hierwm_core::TimingReport;

/// 16×16 frames, 5-frame clips, a one-block model.
const SMALL: &str = r#"
[world]
image_height = 16
image_width = 16
[data]
episodes = 2
length = 17
[train]
K = 5
coarse_stride = 4
steps = 2
batch_size = 2
[train.model]
token_dim = 8
num_blocks = 1
num_heads = 2
[distill]
K_c = 5
m = 3
steps = 2
[rollout]
frames = 17
sampler_steps = 2
workers = 2
"#;

fn setup(dir: &Path) -> String {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, format!("output_dir = {:?}\n{SMALL}", dir.display().to_string())).unwrap();
    cfg.to_str().unwrap().to_owned()
}

fn hierwm(cfg: &str, args: &[&str]) -> i32 {
    let mut argv = vec!["hierwm", "--config", cfg];
    argv.extend_from_slice(args);
    run(argv)
}

fn ppm_count(dir: &Path) -> usize {
    std::fs::read_dir(dir).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ppm")).count()
}

#[test]
fn gen_data_writes_one_directory_per_episode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = dir.path().join("eps");
    assert_eq!(hierwm(&cfg, &["gen-data", "--episodes", "3", "--length", "6", "--seed", "7", "--out", out.to_str().unwrap()]), 0);
    let mut names: Vec<String> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["ep_000", "ep_001", "ep_002"]);
    assert_eq!(ppm_count(&out.join("ep_001")), 6);
    assert!(out.join("ep_001/005.ppm").is_file());
}

#[test]
fn bad_invocations_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    assert_ne!(run(["hierwm", "teleport"]), 0);
    assert_ne!(hierwm(&cfg, &["gen-data", "--frobnicate"]), 0);
    assert_ne!(hierwm(&cfg, &["rollout"]), 0);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nK = 9\n").unwrap();
    assert_ne!(run(["hierwm", "--config", bad.to_str().unwrap(), "gen-data"]), 0);
    assert_ne!(hierwm(&cfg, &["train-coarse", "--data", dir.path().join("missing").to_str().unwrap()]), 0);
}

#[test]
fn scripted_pipeline_produces_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_owned();
    assert_eq!(hierwm(&cfg, &["gen-data"]), 0);
    assert_eq!(hierwm(&cfg, &["train-coarse"]), 0);
    assert_eq!(hierwm(&cfg, &["train-fine"]), 0);
    assert!(dir.path().join("fine.loss.csv").is_file());
    assert_eq!(hierwm(&cfg, &["train-fine", "--warp", "--init", &p("fine.ckpt")]), 0);
    assert_eq!(hierwm(&cfg, &["distill"]), 0);
    assert!(dir.path().join("distilled.ckpt").is_file());

    assert_eq!(hierwm(&cfg, &["rollout", "--mode", "hier", "--episode", &p("data/ep_000"), "--out", &p("gen/hier")]), 0);
    assert_eq!(ppm_count(&dir.path().join("gen/hier")), 17);
    let record: RolloutRecord = read_json(&dir.path().join("gen/hier").join(PLAN_FILE)).unwrap();
    assert_eq!(record.coarse_indices, vec![0, 4, 8, 12, 16]);
    let timing: TimingReport = read_json(&dir.path().join("gen/hier").join(TIMING_FILE)).unwrap();
    assert!(timing.phase("interpolation").is_some());

    assert_eq!(hierwm(&cfg, &["rollout", "--mode", "ar", "--episode", &p("data/ep_001"), "--out", &p("gen/ar")]), 0);
    assert_eq!(ppm_count(&dir.path().join("gen/ar")), 17);
    assert_ne!(hierwm(&cfg, &["rollout", "--mode", "traj", "--episode", &p("data/ep_000")]), 0);
    assert_eq!(
        hierwm(&cfg, &["rollout", "--mode", "traj", "--frames", "7", "--waypoints", "0,0;0.3,1;0.5,2", "--episode", &p("data/ep_000"), "--out", &p("traj")]),
        0
    );
    assert_eq!(ppm_count(&dir.path().join("traj")), 7);

    assert_eq!(hierwm(&cfg, &["warp", "--frame", &p("data/ep_000/000.ppm"), "--waypoints", "0,0;1,3", "--frames", "4", "--out", &p("warped")]), 0);
    assert_eq!(ppm_count(&dir.path().join("warped")), 4);

    assert_eq!(hierwm(&cfg, &["eval", "--real", &p("data"), "--generated", &p("gen")]), 0);
    let metrics: hierwm_cli::Metrics = read_json(&dir.path().join("metrics.json")).unwrap();
    assert_eq!((metrics.num_real, metrics.num_generated, metrics.frames), (2, 2, 17));
    assert!(metrics.fvd_proxy >= 0.0 && metrics.boundary_jump.is_some());

    let report = p("report.json");
    assert_eq!(hierwm(&cfg, &["report", "--hier", &p("gen/hier/timing.json"), "--baseline", &p("gen/ar/timing.json"), "--out", &report]), 0);
    let r: TimingReport = read_json(Path::new(&report)).unwrap();
    assert!(r.speedup.unwrap() > 0.0);
}

#[test]
fn corrupted_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    assert_eq!(hierwm(&cfg, &["gen-data"]), 0);
    assert_eq!(hierwm(&cfg, &["train-fine"]), 0);
    let ckpt = dir.path().join("fine.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let pos = bytes.windows(7).position(|w| w == b"version").unwrap();
    bytes[pos..pos + 7].copy_from_slice(b"versiom");
    std::fs::write(&ckpt, &bytes).unwrap();
    let err = hierwm_core::load_checkpoint(&ckpt).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");
    assert_ne!(hierwm(&cfg, &["distill"]), 0);
}
