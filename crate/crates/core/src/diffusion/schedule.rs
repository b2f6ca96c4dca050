//! Noise schedule and the closed-form DDPM algebra: forward process,
//! posterior mean, clean-latent estimate, guidance and timestep respacing.

use djscc_autodiff::{Scalar, Tensor};

use crate::error::{CoreError, Result};

/// Timestep count of the desk configuration.
pub const DESK_STEPS: usize = 200;
/// Linear betas of the 1000-step reference schedule, rescaled by `1000 / T`.
pub const REFERENCE_BETAS: (f64, f64) = (1e-4, 0.02);
/// Bound applied to the clean-latent estimate before guidance.
pub const Z0_CLAMP: f64 = 3.0;

/// `beta`, `alpha`, `alpha_bar` and posterior variance, indexed by `t` in `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_var: Vec<f64>,
}

fn bad_t(t: usize, len: usize) -> CoreError {
    CoreError::Config(format!("timestep {t} outside 1..={len}"))
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(CoreError::Config(format!(
                "need T >= 1 and 0 < beta_start <= beta_end < 1, got T={steps}, [{beta_start}, {beta_end}]"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Desk default: the reference linear schedule rescaled to `steps`.
    pub fn scaled_linear(steps: usize) -> Result<Self> {
        let s = 1000.0 / steps.max(1) as f64;
        Self::linear(steps, REFERENCE_BETAS.0 * s, (REFERENCE_BETAS.1 * s).min(0.999))
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(CoreError::Config("every beta must lie in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self::assemble(betas, alphas, alpha_bars))
    }

    fn assemble(betas: Vec<f64>, alphas: Vec<f64>, alpha_bars: Vec<f64>) -> Self {
        let posterior_var = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]
            })
            .collect();
        Self {
            betas,
            alphas,
            alpha_bars,
            posterior_var,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(bad_t(t, self.steps()));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.idx(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.idx(t)?])
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.idx(t)?])
    }

    /// `sigma_t^2 = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t`.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        Ok(self.posterior_var[self.idx(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// `make_schedule(T, beta_start, beta_end)`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta_start, beta_end)
}

fn combine<S: Scalar>(a: &Tensor<S>, ca: f64, b: &Tensor<S>, cb: f64) -> Result<Tensor<S>> {
    let (ca, cb) = (S::of(ca), S::of(cb));
    Ok(a.zip_map(b, |x, y| ca * x + cb * y)?)
}

/// `z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_diffuse<S: Scalar>(z0: &Tensor<S>, t: usize, eps: &Tensor<S>, sched: &NoiseSchedule) -> Result<Tensor<S>> {
    let ab = sched.alpha_bar(sched.idx(t)? + 1)?;
    combine(z0, ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// `z_t = sqrt(1 - beta_t) z_{t-1} + sqrt(beta_t) eps`.
pub fn single_step_forward<S: Scalar>(
    z_prev: &Tensor<S>,
    t: usize,
    eps: &Tensor<S>,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>> {
    let b = sched.beta(t)?;
    combine(z_prev, (1.0 - b).sqrt(), eps, b.sqrt())
}

/// Posterior mean from a clean-latent estimate:
/// `sqrt(ab_{t-1}) beta_t / (1 - ab_t) z0 + sqrt(alpha_t) (1 - ab_{t-1}) / (1 - ab_t) z_t`.
pub fn posterior_mean<S: Scalar>(z_t: &Tensor<S>, z0_hat: &Tensor<S>, t: usize, sched: &NoiseSchedule) -> Result<Tensor<S>> {
    let b = sched.beta(t)?;
    let ab = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar(t - 1)?;
    let c0 = ab_prev.sqrt() * b / (1.0 - ab);
    let ct = (1.0 - b).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    combine(z0_hat, c0, z_t, ct)
}

/// Posterior mean from a noise estimate:
/// `(z_t - beta_t / sqrt(1 - ab_t) eps) / sqrt(alpha_t)`.
pub fn posterior_mean_eps<S: Scalar>(z_t: &Tensor<S>, eps: &Tensor<S>, t: usize, sched: &NoiseSchedule) -> Result<Tensor<S>> {
    let b = sched.beta(t)?;
    let ab = sched.alpha_bar(t)?;
    let inv = 1.0 / (1.0 - b).sqrt();
    combine(z_t, inv, eps, -inv * b / (1.0 - ab).sqrt())
}

/// `z0 ~= (z_t - sqrt(1 - ab_t) eps_pred) / sqrt(ab_t)`.
pub fn estimate_z0<S: Scalar>(z_t: &Tensor<S>, t: usize, eps_pred: &Tensor<S>, sched: &NoiseSchedule) -> Result<Tensor<S>> {
    let ab = sched.alpha_bar(sched.idx(t)? + 1)?;
    let inv = 1.0 / ab.sqrt();
    combine(z_t, inv, eps_pred, -(1.0 - ab).sqrt() * inv)
}

/// `z0 - (lambda / N)(z0 - f_v)` with `N = C_l H_l W_l` and `lambda` clamped
/// to `[0, N]`. `lambda = 0` returns `z0` unchanged.
pub fn apply_guidance<S: Scalar>(z0: &Tensor<S>, f_v: &Tensor<S>, lambda: f64, dims: [usize; 3]) -> Result<Tensor<S>> {
    if z0.shape() != f_v.shape() {
        return Err(CoreError::Shape(format!(
            "guidance target {:?} does not match latent {:?}",
            f_v.shape(),
            z0.shape()
        )));
    }
    let per_item: usize = dims.iter().product();
    if per_item == 0 || z0.numel() % per_item != 0 {
        return Err(CoreError::Shape(format!("latent dims {dims:?} do not tile {:?}", z0.shape())));
    }
    let n = per_item as f64;
    let lambda = if lambda.is_nan() { 0.0 } else { lambda.clamp(0.0, n) };
    if lambda == 0.0 {
        return Ok(z0.clone());
    }
    if lambda == n {
        return Ok(f_v.clone());
    }
    let w = S::of(lambda / n);
    Ok(z0.zip_map(f_v, |a, b| a - w * (a - b))?)
}

/// Evenly spaced timesteps `t_k = floor(k T / n)`, `k = 1..=n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimestepMap {
    steps: Vec<usize>,
}

impl TimestepMap {
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Schedule over the selected steps: `alpha_bar'_k = alpha_bar_{t_k}` and
    /// `beta'_k = 1 - alpha_bar_{t_k} / alpha_bar_{t_{k-1}}`. Unit gaps keep the
    /// original `beta` so that `n = T` reproduces the schedule bit for bit.
    pub fn respace(&self, sched: &NoiseSchedule) -> Result<NoiseSchedule> {
        let mut betas = Vec::with_capacity(self.len());
        let mut alphas = Vec::with_capacity(self.len());
        let mut alpha_bars = Vec::with_capacity(self.len());
        let mut prev_t = 0;
        for &t in &self.steps {
            let ab = sched.alpha_bar(t)?;
            let (beta, alpha) = if t == prev_t + 1 {
                (sched.beta(t)?, sched.alpha(t)?)
            } else {
                let a = ab / sched.alpha_bar(prev_t)?;
                (1.0 - a, a)
            };
            betas.push(beta);
            alphas.push(alpha);
            alpha_bars.push(ab);
            prev_t = t;
        }
        Ok(NoiseSchedule::assemble(betas, alphas, alpha_bars))
    }
}

pub fn space_timesteps(total: usize, n_steps: usize) -> Result<TimestepMap> {
    if n_steps == 0 || n_steps > total {
        return Err(CoreError::Config(format!("need 1 <= n_steps <= T, got {n_steps} of {total}")));
    }
    Ok(TimestepMap {
        steps: (1..=n_steps).map(|k| k * total / n_steps).collect(),
    })
}
