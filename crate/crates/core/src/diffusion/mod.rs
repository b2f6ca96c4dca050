//! Conditional latent DDPM: schedule algebra, the denoiser with its
//! zero-initialized control branch, training stages and samplers.

pub mod sampler;
pub mod schedule;
pub mod train;
pub mod unet;

pub use sampler::{
    ddpm_sample_latent, guided_sample, guided_sample_latent, guided_sample_latent_traced, EpsModel, SamplingPlan,
};
pub use schedule::{
    apply_guidance, estimate_z0, forward_diffuse, make_schedule, posterior_mean, posterior_mean_eps,
    single_step_forward, space_timesteps, NoiseSchedule, TimestepMap, DESK_STEPS, Z0_CLAMP,
};
pub use train::{pretrain_base, train_control, ConditionSource};
pub use unet::{CondVars, Denoiser, DenoiserConfig, DenoiserModel};
