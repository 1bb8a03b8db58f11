//! Toy conditional DDPM: schedule, denoiser, loss, sampler.

pub mod loss;
pub mod model;
pub mod params;
pub mod sampler;
pub mod schedule;

pub use loss::{ddpm_loss, loss_gradient, q_sample, strided_loss, strided_timesteps, Evaluator, RegionMask};
pub use model::Architecture;
pub use params::{Gradient, Layout, ParamVector, Segment, SegmentSet};
pub use sampler::sample;
pub use schedule::{DiffusionConfig, ImageShape};
