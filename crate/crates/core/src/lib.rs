//! Hierarchical coarse/fine latent diffusion world model on a procedural driving world.
//!
//! A coarse denoiser generates low-rate keyframes; a fine denoiser fills each
//! gap between keyframes, conditioned on both ends, so gaps can run in
//! parallel. Distillation aligns the coarse model's one-step predictions with
//! the fine model's.

pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod denoiser;
pub mod distill;
pub mod error;
pub mod evalmetrics;
pub mod io;
pub mod losses;
pub mod rollout;
pub mod schedule;
pub mod tensor;
pub mod toyworld;
pub mod trainer;
pub mod trajwarp;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use codec::{Codec, Frame, Latent, LatentClip};
pub use denoiser::{ConditioningPack, DenoiserConfig, DenoiserParams};
pub use distill::{DistillConfig, JointTarget};
pub use error::{Error, Result};
pub use evalmetrics::{FeatureExtractor, PhaseTiming, TimingReport};
pub use losses::LossWeights;
pub use rollout::{RolloutPlan, SamplerOptions};
pub use schedule::{NoiseSchedule, ScheduleParams};
pub use toyworld::{ConditionEmbedding, Episode, WorldParams};
pub use trainer::{LossRecord, ModelDims, TrainConfig};
pub use trajwarp::{CameraPose, TrajectorySpec};
