//! Parameterized layers. Each layer only holds [`ParamId`]s into a
//! [`ParamStore`]; forward passes look the bound variables up.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Uniform `±1/sqrt(fan_in)` init.
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[cout, cin, kernel, kernel], bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::uniform(&[cout], bound, rng));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    /// Weight and bias exactly zero.
    pub fn zeros<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::zeros(&[cout, cin, kernel, kernel]),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p[self.weight], Some(p[self.bias]), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((cout * kernel * kernel) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[cin, cout, kernel, kernel], bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::uniform(&[cout], bound, rng));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        g.conv_transpose2d(x, p[self.weight], Some(p[self.bias]), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[outputs, inputs], bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::uniform(&[outputs], bound, rng));
        Self { weight, bias }
    }

    pub fn zeros<S: Scalar>(store: &mut ParamStore<S>, name: &str, inputs: usize, outputs: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[outputs, inputs]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Self { weight, bias }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p[self.weight], Some(p[self.bias]))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    /// Uses the largest group count `<= groups` that divides `channels`.
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize, groups: usize) -> Self {
        let groups = (1..=groups.min(channels).max(1))
            .rev()
            .find(|g| channels % g == 0)
            .unwrap_or(1);
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[channels]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self { gamma, beta, groups }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        g.group_norm(x, p[self.gamma], p[self.beta], self.groups)
    }
}
