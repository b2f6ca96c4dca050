//! Reverse-process samplers: plain conditional DDPM and the guided sampler
//! that pulls each clean-latent estimate toward the spatial condition.

use djscc_autodiff::Tensor;

use super::schedule::{
    apply_guidance, estimate_z0, posterior_mean, space_timesteps, NoiseSchedule, Z0_CLAMP,
};
use super::unet::DenoiserModel;
use crate::conditioning::ConditionSet;
use crate::error::{CoreError, Result};
use crate::latent::LatentCodec;
use crate::rng::Rng;

/// Noise predictor consumed by the samplers.
pub trait EpsModel {
    fn eps(&self, z_t: &Tensor<f32>, t: &[usize], cond: &ConditionSet) -> Result<Tensor<f32>>;
}

impl EpsModel for DenoiserModel {
    fn eps(&self, z_t: &Tensor<f32>, t: &[usize], cond: &ConditionSet) -> Result<Tensor<f32>> {
        self.predict(z_t, t, cond)
    }
}

/// Reverse-chain coefficients (indexed `1..=n`) and the training timestep
/// fed to the model at each of them.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPlan {
    pub schedule: NoiseSchedule,
    pub timesteps: Vec<usize>,
}

impl SamplingPlan {
    pub fn full(sched: &NoiseSchedule) -> Self {
        Self {
            schedule: sched.clone(),
            timesteps: (1..=sched.steps()).collect(),
        }
    }

    pub fn spaced(sched: &NoiseSchedule, n_steps: usize) -> Result<Self> {
        let map = space_timesteps(sched.steps(), n_steps)?;
        Ok(Self {
            schedule: map.respace(sched)?,
            timesteps: map.steps().to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }
}

fn initial_latent(shape: &[usize], rngs: &mut [Rng]) -> Result<Tensor<f32>> {
    if rngs.len() != shape[0] {
        return Err(CoreError::Shape(format!("{} random streams for {} items", rngs.len(), shape[0])));
    }
    let item = [1, shape[1], shape[2], shape[3]];
    let parts: Vec<Tensor<f32>> = rngs.iter_mut().map(|r| Tensor::randn(&item, r)).collect();
    Ok(Tensor::concat_outer(&parts)?)
}

/// `mu + sigma * n` with per-item noise streams.
fn perturb(mu: &Tensor<f32>, sigma: f64, rngs: &mut [Rng]) -> Result<Tensor<f32>> {
    let noise = initial_latent(mu.shape(), rngs)?;
    let s = sigma as f32;
    Ok(mu.zip_map(&noise, |m, e| m + s * e)?)
}

/// Guided reverse chain returning the final latent. `on_step(k, z)` sees the
/// latent after every step (`k = n..1`).
pub fn guided_sample_latent_traced(
    model: &impl EpsModel,
    cond: &ConditionSet,
    lambda: f64,
    plan: &SamplingPlan,
    rngs: &mut [Rng],
    on_step: &mut dyn FnMut(usize, &Tensor<f32>),
) -> Result<Tensor<f32>> {
    let dims = cond.latent_dims();
    let mut z = initial_latent(cond.f_v().shape(), rngs)?;
    let sched = &plan.schedule;
    for k in (1..=plan.len()).rev() {
        let t = vec![plan.timesteps[k - 1]; cond.len()];
        let eps = model.eps(&z, &t, cond)?;
        let z0 = estimate_z0(&z, k, &eps, sched)?.clamp(-Z0_CLAMP as f32, Z0_CLAMP as f32);
        let z0 = apply_guidance(&z0, cond.f_v(), lambda, dims)?;
        let mu = posterior_mean(&z, &z0, k, sched)?;
        z = if k > 1 {
            perturb(&mu, sched.posterior_variance(k)?.sqrt(), rngs)?
        } else {
            mu
        };
        on_step(k, &z);
    }
    Ok(z)
}

pub fn guided_sample_latent(
    model: &impl EpsModel,
    cond: &ConditionSet,
    lambda: f64,
    plan: &SamplingPlan,
    rngs: &mut [Rng],
) -> Result<Tensor<f32>> {
    guided_sample_latent_traced(model, cond, lambda, plan, rngs, &mut |_, _| {})
}

/// Guided sampling followed by the latent decoder: `x_diff = D(z_0)`.
pub fn guided_sample(
    model: &impl EpsModel,
    codec: &LatentCodec,
    cond: &ConditionSet,
    lambda: f64,
    plan: &SamplingPlan,
    rngs: &mut [Rng],
) -> Result<Tensor<f32>> {
    let z0 = guided_sample_latent(model, cond, lambda, plan, rngs)?;
    codec.decode_latent(&z0)
}

/// Plain conditional ancestral sampler (clean-latent form, no guidance).
pub fn ddpm_sample_latent(
    model: &impl EpsModel,
    cond: &ConditionSet,
    plan: &SamplingPlan,
    rngs: &mut [Rng],
) -> Result<Tensor<f32>> {
    let mut z = initial_latent(cond.f_v().shape(), rngs)?;
    let sched = &plan.schedule;
    for k in (1..=plan.len()).rev() {
        let t = vec![plan.timesteps[k - 1]; cond.len()];
        let eps = model.eps(&z, &t, cond)?;
        let z0 = estimate_z0(&z, k, &eps, sched)?.clamp(-Z0_CLAMP as f32, Z0_CLAMP as f32);
        let mu = posterior_mean(&z, &z0, k, sched)?;
        z = if k > 1 {
            perturb(&mu, sched.posterior_variance(k)?.sqrt(), rngs)?
        } else {
            mu
        };
    }
    Ok(z)
}
