//! Conditional denoising-diffusion toolkit for audio-driven motion: noise
//! schedules, the diffusion forward/reverse processes with classifier-free
//! and interpolated guidance, a Conformer-style denoiser with hand-rolled
//! gradients, motion and audio feature pipelines, training with checkpoints,
//! and closed-form Gaussian oracles for end-to-end verification.

pub mod audio;
pub mod bvh;
pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod motion;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod rotation;
pub mod schedule;
pub mod training;

pub use data::{ConditioningSequence, FeatureLayout, FeatureMatrix, FeatureSpan, PoseSequence};
pub use checkpoint::Checkpoint;
pub use denoiser::{Denoiser, DenoiserConfig, DenoiserModel};
pub use training::{Dataset, TrainConfig, Trainer, TrainingExample};
pub use diffusion::{EpsilonPredictor, GuidanceMode, GuidanceSpec, TrainingWeighting};
pub use error::{Error, Result};
pub use schedule::{build_schedule, NoiseSchedule, ScheduleConfig, SigmaMode};
