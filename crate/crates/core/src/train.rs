//! Shared optimization loop: minibatch sampling, Adam with cosine decay,
//! divergence detection and loss bookkeeping.

use djscc_autodiff::{Adam, Bound, CosineSchedule, Graph, ParamStore, Scalar, TensorError, Var};
use rand::seq::SliceRandom;

use crate::error::{CoreError, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr`.
    pub lr_floor: f64,
    pub seed: u64,
    /// Adam second-moment decay.
    pub beta2: f64,
    /// Emit a log line every this many iterations (0 disables).
    pub log_every: usize,
}

impl TrainConfig {
    pub fn new(iters: usize, batch_size: usize, lr: f64, seed: u64) -> Self {
        Self {
            iters,
            batch_size,
            lr,
            lr_floor: 0.1,
            seed,
            beta2: 0.999,
            log_every: 0,
        }
    }
}

/// Per-iteration losses plus a fixed-batch evaluation before and after training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub initial_eval: f64,
    pub final_eval: f64,
}

impl TrainReport {
    /// `1 - final/initial` on the fixed evaluation batch.
    pub fn relative_drop(&self) -> f64 {
        1.0 - self.final_eval / self.initial_eval
    }

    /// Trailing moving average with the given window.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        moving_average(&self.losses, window)
    }
}

pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    if values.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(values.len() + 1 - window);
    let mut acc: f64 = values[..window].iter().sum();
    out.push(acc / window as f64);
    for i in window..values.len() {
        acc += values[i] - values[i - window];
        out.push(acc / window as f64);
    }
    out
}

/// Reshuffled passes over `0..n` in fixed-size batches.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: Rng,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, rng: Rng) -> Result<Self> {
        if n == 0 {
            return Err(CoreError::EmptyDataset);
        }
        let mut s = Self {
            order: (0..n).collect(),
            pos: 0,
            batch: batch.clamp(1, n),
            rng,
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

fn diverged(stage: &'static str, iter: usize, e: CoreError) -> CoreError {
    match e {
        CoreError::Tensor(TensorError::NonFinite { op }) => CoreError::Diverged {
            stage,
            iter,
            reason: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Runs `cfg.iters` Adam steps. `loss_fn` builds the loss for iteration `i`
/// on a fresh graph with the store bound.
pub fn fit<S, F>(
    store: &mut ParamStore<S>,
    cfg: &TrainConfig,
    stage: &'static str,
    mut loss_fn: F,
) -> Result<Vec<f64>>
where
    S: Scalar,
    F: FnMut(&mut Graph<S>, &Bound, usize) -> Result<Var>,
{
    let mut adam = Adam::with_betas(cfg.lr, 0.9, cfg.beta2, 1e-8);
    let schedule = CosineSchedule {
        base: cfg.lr,
        floor: cfg.lr * cfg.lr_floor,
        total: cfg.iters,
    };
    let mut losses = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        adam.lr = schedule.lr(iter);
        let mut g = Graph::new();
        let bound = store.bind(&mut g)?;
        let loss = loss_fn(&mut g, &bound, iter).map_err(|e| diverged(stage, iter, e))?;
        let value = g.value(loss).data()[0].f64();
        if !value.is_finite() {
            return Err(CoreError::Diverged {
                stage,
                iter,
                reason: format!("loss {value}"),
            });
        }
        let mut grads = g.backward(loss)?;
        adam.step(store, &bound.grads(&mut grads))?;
        losses.push(value);
        if cfg.log_every > 0 && (iter + 1) % cfg.log_every == 0 {
            let recent = &losses[losses.len().saturating_sub(cfg.log_every)..];
            let avg = recent.iter().sum::<f64>() / recent.len() as f64;
            log::info!("{stage}: iter {}/{} loss {avg:.5}", iter + 1, cfg.iters);
        }
    }
    Ok(losses)
}

/// Sampler stream for a training stage.
pub fn batch_rng(seed: u64, stage: &str) -> Rng {
    rng::stream(seed, 0, &format!("{stage}/batches"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_covers_every_item_per_pass() {
        let mut s = BatchSampler::new(10, 5, rng::stream(1, 0, "t")).unwrap();
        let mut seen: Vec<usize> = s.next_batch();
        seen.extend(s.next_batch());
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert!(BatchSampler::new(0, 4, rng::stream(1, 0, "t")).is_err());
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 2).is_empty());
    }
}
