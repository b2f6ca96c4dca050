//! Base pretraining (unconditional) and control-branch training.

use djscc_autodiff::{Bound, Graph, Scalar, Tensor, Var};
use rand::Rng as _;

use super::schedule::{forward_diffuse, NoiseSchedule};
use super::unet::{is_base, is_control_stage, Denoiser, DenoiserModel};
use crate::channel::ChannelState;
use crate::conditioning::{assemble_conditions, extract_spatial_condition, ConditionSet};
use crate::data::ImageSet;
use crate::error::{CoreError, Result};
use crate::jscc::JsccModel;
use crate::latent::LatentCodec;
use crate::rng::{self, Rng};
use crate::train::{self, BatchSampler, TrainConfig, TrainReport};

/// `z_t` for per-item timesteps.
pub fn diffuse_batch(z0: &Tensor<f32>, t: &[usize], eps: &Tensor<f32>, sched: &NoiseSchedule) -> Result<Tensor<f32>> {
    let n = z0.shape()[0];
    if t.len() != n || eps.shape() != z0.shape() {
        return Err(CoreError::Shape(format!(
            "{} timesteps and noise {:?} for latents {:?}",
            t.len(),
            eps.shape(),
            z0.shape()
        )));
    }
    let parts = (0..n)
        .map(|i| forward_diffuse(&z0.slice_outer(i, i + 1)?, t[i], &eps.slice_outer(i, i + 1)?, sched))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::concat_outer(&parts)?)
}

/// Uniform timesteps in `1..=T` and standard normal noise.
pub fn draw_noise(shape: &[usize], steps: usize, r: &mut Rng) -> (Vec<usize>, Tensor<f32>) {
    let t = (0..shape[0]).map(|_| r.gen_range(1..=steps)).collect();
    (t, Tensor::randn(shape, r))
}

struct NoisyBatch {
    z_t: Tensor<f32>,
    t: Vec<usize>,
    eps: Tensor<f32>,
}

impl NoisyBatch {
    fn draw(z0: &Tensor<f32>, sched: &NoiseSchedule, r: &mut Rng) -> Result<Self> {
        let (t, eps) = draw_noise(z0.shape(), sched.steps(), r);
        let z_t = diffuse_batch(z0, &t, &eps, sched)?;
        Ok(Self { z_t, t, eps })
    }
}

fn base_loss<S: Scalar>(net: &Denoiser, g: &mut Graph<S>, p: &Bound, b: &NoisyBatch) -> Result<Var> {
    let z = g.constant(b.z_t.cast())?;
    let f_t = g.constant(net.null_text(b.t.len()))?;
    let out = net.base_forward(g, p, z, &b.t, f_t)?;
    let eps = g.constant(b.eps.cast())?;
    Ok(g.mse_loss(out, eps)?)
}

fn control_loss<S: Scalar>(net: &Denoiser, g: &mut Graph<S>, p: &Bound, b: &NoisyBatch, c: &ConditionSet) -> Result<Var> {
    let z = g.constant(b.z_t.cast())?;
    let vars = net.condition_vars(g, p, c)?;
    let out = net.forward(g, p, z, &b.t, &vars)?;
    let eps = g.constant(b.eps.cast())?;
    Ok(g.mse_loss(out, eps)?)
}

fn eval_with(model: &DenoiserModel, f: impl FnOnce(&Denoiser, &mut Graph<f32>, &Bound) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g)?;
    let l = f(&model.net, &mut g, &p)?;
    Ok(g.value(l).data()[0] as f64)
}

/// Trains the base UNet on clean latents `[N, C_l, H_l, W_l]` with null
/// text and no control branch. Afterwards the base is frozen and the
/// control branch is initialized as a copy of the base encoder.
pub fn pretrain_base(
    model: &mut DenoiserModel,
    latents: &Tensor<f32>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let n = latents.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(CoreError::EmptyDataset);
    }
    model.params.set_trainable(|_| true, false);
    model.params.set_trainable(is_base, true);

    let eval_z0 = latents.slice_outer(0, n.min(cfg.batch_size.max(32)))?;
    let eval = NoisyBatch::draw(&eval_z0, sched, &mut rng::stream(cfg.seed, 0, "base/eval"))?;
    let initial_eval = eval_with(model, |net, g, p| base_loss(net, g, p, &eval))?;

    let mut sampler = BatchSampler::new(n, cfg.batch_size, train::batch_rng(cfg.seed, "base"))?;
    let net = model.net.clone();
    let losses = train::fit(&mut model.params, cfg, "base", |g, p, iter| {
        let z0 = latents.select_outer(&sampler.next_batch())?;
        let b = NoisyBatch::draw(&z0, sched, &mut rng::stream(cfg.seed, iter as u64, "base/noise"))?;
        base_loss(&net, g, p, &b)
    })?;
    let final_eval = eval_with(model, |net, g, p| base_loss(net, g, p, &eval))?;

    model.params.set_trainable(is_base, false);
    model.net.init_control_from_base(&mut model.params)?;
    Ok(TrainReport {
        losses,
        initial_eval,
        final_eval,
    })
}

/// Frozen upstream models that turn an image batch into conditions.
#[derive(Clone, Copy)]
pub struct ConditionSource<'a> {
    pub jscc: &'a JsccModel,
    pub codec: &'a LatentCodec,
}

impl ConditionSource<'_> {
    /// Draws one `gamma` for the batch and one gain per image, transmits,
    /// and encodes the reconstructions into `f_v`.
    pub fn conditions(
        &self,
        images: &Tensor<f32>,
        labels: &[usize],
        null_label: usize,
        r: &mut Rng,
        noise_seed: (u64, u64),
    ) -> Result<ConditionSet> {
        let n = labels.len();
        let (lo, hi) = self.jscc.config().snr_range_db;
        let gamma = if hi > lo { r.gen_range(lo..=hi) } else { lo };
        let states = self.jscc.net.draw_states(n, gamma, r)?;
        self.conditions_for(images, labels, null_label, states, noise_seed)
    }

    /// Same with explicit channel states; channel noise for item `i` comes
    /// from stream `(seed, base_index + i)`.
    pub fn conditions_for(
        &self,
        images: &Tensor<f32>,
        labels: &[usize],
        null_label: usize,
        states: Vec<ChannelState>,
        (seed, base_index): (u64, u64),
    ) -> Result<ConditionSet> {
        let mut rngs: Vec<Rng> = (0..labels.len() as u64)
            .map(|i| rng::stream(seed, base_index + i, "condition/channel"))
            .collect();
        let x_hat = self.jscc.transmit(images, &states, &mut rngs)?;
        let f_v = extract_spatial_condition(&x_hat, self.codec)?;
        let s = f_v.shape().to_vec();
        assemble_conditions(f_v, Some(labels), null_label, states, [s[1], s[2], s[3]])
    }
}

/// Trains the control branch, zero convs, CSI MLP and text table with the
/// base frozen. Each batch runs the images through the JSCC link at a fresh
/// channel draw. With `fixed_noise` every iteration reuses the first
/// iteration's channel, timesteps and noise.
#[allow(clippy::too_many_arguments)]
pub fn train_control(
    model: &mut DenoiserModel,
    data: &ImageSet,
    latents: &Tensor<f32>,
    source: ConditionSource<'_>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    fixed_noise: bool,
) -> Result<TrainReport> {
    if latents.shape().first() != Some(&data.len()) {
        return Err(CoreError::Shape(format!(
            "{} images but latents {:?}",
            data.len(),
            latents.shape()
        )));
    }
    model.params.set_trainable(|_| true, false);
    model.params.set_trainable(is_control_stage, true);
    let null = model.net.text.null_label();

    let eval_idx: Vec<usize> = (0..data.len().min(cfg.batch_size.max(32))).collect();
    let mut er = rng::stream(cfg.seed, 0, "control/eval");
    let (x, labels) = data.batch(&eval_idx)?;
    let eval_cond = source.conditions(&x, &labels, null, &mut er, (cfg.seed ^ 0x5eed, 0))?;
    let eval = NoisyBatch::draw(&latents.select_outer(&eval_idx)?, sched, &mut er)?;
    let initial_eval = eval_with(model, |net, g, p| control_loss(net, g, p, &eval, &eval_cond))?;

    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, train::batch_rng(cfg.seed, "control"))?;
    let net = model.net.clone();
    let mut held: Option<(NoisyBatch, ConditionSet)> = None;
    let losses = train::fit(&mut model.params, cfg, "control", |g, p, iter| {
        let idx = sampler.next_batch();
        if fixed_noise {
            if held.is_none() {
                held = Some(draw_control_batch(data, latents, &idx, source, null, sched, cfg.seed, 0)?);
            }
            let (b, c) = held.as_ref().expect("just set");
            return control_loss(&net, g, p, b, c);
        }
        let (b, c) = draw_control_batch(data, latents, &idx, source, null, sched, cfg.seed, iter as u64)?;
        control_loss(&net, g, p, &b, &c)
    })?;
    let final_eval = eval_with(model, |net, g, p| control_loss(net, g, p, &eval, &eval_cond))?;
    model.params.set_trainable(is_control_stage, false);
    Ok(TrainReport {
        losses,
        initial_eval,
        final_eval,
    })
}

#[allow(clippy::too_many_arguments)]
fn draw_control_batch(
    data: &ImageSet,
    latents: &Tensor<f32>,
    idx: &[usize],
    source: ConditionSource<'_>,
    null: usize,
    sched: &NoiseSchedule,
    seed: u64,
    iter: u64,
) -> Result<(NoisyBatch, ConditionSet)> {
    let (x, labels) = data.batch(idx)?;
    let mut r = rng::stream(seed, iter, "control/draw");
    let cond = source.conditions(&x, &labels, null, &mut r, (seed, iter * idx.len() as u64))?;
    let b = NoisyBatch::draw(&latents.select_outer(idx)?, sched, &mut r)?;
    Ok((b, cond))
}
