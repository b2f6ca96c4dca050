use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with bias correction. Only trainable parameters are touched.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Option<(Vec<S>, Vec<S>)>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[Option<Tensor<S>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(TensorError::InvalidShape {
                op: "adam_step",
                msg: format!("{} gradients for {} parameters", grads.len(), store.len()),
            });
        }
        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), || None);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let (one, eps) = (S::one(), S::of(self.eps));
        let step_size = S::of(self.lr / bc1);
        let inv_bc2 = S::of(1.0 / bc2);
        for (i, (entry, grad)) in store.entries_mut().iter_mut().zip(grads).enumerate() {
            if !entry.trainable {
                continue;
            }
            let grad = grad
                .as_ref()
                .ok_or_else(|| TensorError::MissingGrad(entry.name.clone()))?;
            if grad.shape() != entry.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: entry.value.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            let n = entry.value.numel();
            let (m, v) = self.moments[i].get_or_insert_with(|| (vec![S::zero(); n], vec![S::zero(); n]));
            if m.len() != n {
                return Err(TensorError::InvalidShape {
                    op: "adam_step",
                    msg: format!("state for `{}` has {} entries, parameter has {n}", entry.name, m.len()),
                });
            }
            for (((p, &gv), m), v) in entry
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (one - b1) * gv;
                *v = b2 * *v + (one - b2) * gv * gv;
                *p = *p - step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` to `floor` over `total` iterations.
#[derive(Clone, Copy, Debug)]
pub struct CosineSchedule {
    pub base: f64,
    pub floor: f64,
    pub total: usize,
}

impl CosineSchedule {
    pub fn lr(&self, iter: usize) -> f64 {
        if self.total == 0 {
            return self.base;
        }
        let progress = (iter.min(self.total) as f64) / self.total as f64;
        self.floor + 0.5 * (self.base - self.floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_f64(&[values.len()], values).unwrap());
        s
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut s = store(&[0.5, -1.5, 2.0]);
        let before = s.clone();
        let mut adam = Adam::new(0.0);
        let g = Tensor::from_f64(&[3], &[1.0, -2.0, 0.1]).unwrap();
        for _ in 0..5 {
            adam.step(&mut s, &[Some(g.clone())]).unwrap();
        }
        assert_eq!(s, before);
    }

    #[test]
    fn first_step_is_signed_lr() {
        // m_hat = g, v_hat = g^2, so the update is -lr * g / (|g| + eps).
        let lr = 1e-3;
        let mut s = store(&[0.0, 0.0, 0.0]);
        let mut adam = Adam::new(lr);
        let g = Tensor::from_f64(&[3], &[0.3, -4.0, 1e-2]).unwrap();
        adam.step(&mut s, &[Some(g.clone())]).unwrap();
        for (p, gv) in s.get(s.find("w").unwrap()).data().iter().zip(g.data()) {
            assert!((p + gv.signum() * lr).abs() < 1e-6, "{p}");
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut s = store(&[1.0, -2.0, 0.5, 3.0]);
        let id = s.find("w").unwrap();
        let mut adam = Adam::new(0.05);
        let mut steps = 0;
        while s.get(id).norm().powi(2) >= 1e-3 {
            let g = s.get(id).map(|w| 2.0 * w);
            adam.step(&mut s, &[Some(g)]).unwrap();
            steps += 1;
            assert!(steps <= 500, "did not converge in 500 steps");
        }
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut s = store(&[1.0]);
        let err = Adam::new(0.1).step(&mut s, &[None]).unwrap_err();
        assert!(matches!(err, TensorError::MissingGrad(name) if name == "w"));
    }

    #[test]
    fn frozen_params_need_no_grad() {
        let mut s = store(&[1.0]);
        s.set_trainable(|_| true, false);
        Adam::new(0.1).step(&mut s, &[None]).unwrap();
    }

    #[test]
    fn cosine_endpoints() {
        let c = CosineSchedule {
            base: 1e-3,
            floor: 0.0,
            total: 100,
        };
        assert_eq!(c.lr(0), 1e-3);
        assert!(c.lr(100).abs() < 1e-18);
        assert!((c.lr(50) - 5e-4).abs() < 1e-15);
    }
}
