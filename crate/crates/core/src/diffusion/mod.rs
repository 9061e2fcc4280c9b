//! Minimal diffusion substrate: denoiser, losses, noise, schedules,
//! deterministic sampling, and pretraining.

pub mod arch;
pub mod loss;
pub mod network;
pub mod noise;
pub mod optim;
pub mod params;
pub mod sampler;
pub mod schedule;
pub mod snapshot;
pub mod train;

pub use arch::{ArchConfig, Condition, Conditioning, ImageShape};
pub use loss::{diffusion_loss, LossConfig, LossVariant};
pub use noise::{sample_training_noise, NoiseDraw};
pub use sampler::generate;
pub use schedule::{build_generation_schedule, GenerationSchedule};
pub use snapshot::{ModelSnapshot, Provenance, Role};
pub use train::{pretrain, PretrainOutput, TrainConfig};
