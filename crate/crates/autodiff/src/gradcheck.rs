//! Central finite-difference verification of analytic gradients.
//!
//! The checker only ever evaluates forward passes to build the numeric
//! gradient, so it stays independent of every backward rule it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Builds an op output from input variables.
pub type OpFn = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// One differentiable op with a generator of random inputs.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>,
    pub build: Box<OpFn>,
}

#[derive(Clone, Debug)]
pub struct GradCheckOutcome {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

/// Scalarizes `build`'s output with fixed random weights and returns the
/// worst normwise relative error `max|a-n| / max(max|a|, max|n|)` over inputs.
pub fn check_gradients(inputs: &[Tensor<f64>], build: &OpFn, step: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loss_of = |vals: &[Tensor<f64>], weights: &Tensor<f64>| -> Result<(Graph<f64>, Var, Vec<Var>)> {
        let mut g = Graph::new();
        let vars = vals
            .iter()
            .map(|t| g.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &vars)?;
        let wv = g.constant(weights.clone())?;
        let prod = g.mul(out, wv)?;
        let loss = g.sum(prod)?;
        Ok((g, loss, vars))
    };

    let out_shape = {
        let mut g = Graph::new();
        let vars = inputs
            .iter()
            .map(|t| g.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &vars)?;
        g.shape(out).to_vec()
    };
    let weights = Tensor::from_vec(
        &out_shape,
        (0..out_shape.iter().product::<usize>())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )?;

    let (mut g, loss, vars) = loss_of(inputs, &weights)?;
    let mut grads = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .take(*var)
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut numeric = vec![0.0; inputs[k].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= step;
            let (gp, lp, _) = loss_of(&plus, &weights)?;
            let (gm, lm, _) = loss_of(&minus, &weights)?;
            *slot = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * step);
        }
        let scale = analytic
            .data()
            .iter()
            .chain(&numeric)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = analytic
            .data()
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    Ok(worst)
}

/// Runs `instances` random instances of `case` at the given step.
pub fn run_case(case: &OpCase, instances: usize, step: f64, seed: u64) -> Result<GradCheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let inputs = (case.inputs)(&mut rng);
        let err = check_gradients(&inputs, case.build.as_ref(), step, seed ^ (i as u64 + 1))?;
        worst = worst.max(err);
    }
    Ok(GradCheckOutcome {
        op: case.name,
        instances,
        max_rel_err: worst,
    })
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape, rng)
}

/// Normal samples pushed at least `margin` away from each point in `kinks`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], kinks: &[f64], margin: f64) -> Tensor<f64> {
    let mut t = randn(rng, shape);
    for v in t.data_mut() {
        for &k in kinks {
            if (*v - k).abs() < margin {
                *v = k + if *v >= k { margin } else { -margin } * 2.0;
            }
        }
    }
    t
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

/// One case per differentiable op kind of [`Graph`].
pub fn all_op_cases() -> Vec<OpCase> {
    fn case(
        name: &'static str,
        inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + 'static,
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> OpCase {
        OpCase {
            name,
            inputs: Box::new(inputs),
            build: Box::new(build),
        }
    }
    fn pair(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        let shape = [dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 3)];
        vec![randn(rng, &shape), randn(rng, &shape)]
    }
    fn single(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        let shape = [dim(rng, 1, 3), dim(rng, 1, 5)];
        vec![randn(rng, &shape)]
    }
    fn image(rng: &mut ChaCha8Rng, c: usize, even: bool) -> Tensor<f64> {
        let (mut h, mut w) = (dim(rng, 2, 6), dim(rng, 2, 6));
        if even {
            h += h % 2;
            w += w % 2;
        }
        let n = dim(rng, 1, 2);
        randn(rng, &[n, c, h, w])
    }

    vec![
        case("add", pair, |g, v| g.add(v[0], v[1])),
        case("sub", pair, |g, v| g.sub(v[0], v[1])),
        case("mul", pair, |g, v| g.mul(v[0], v[1])),
        case("scale", single, |g, v| g.scale(v[0], -1.7)),
        case("add_scalar", single, |g, v| g.add_scalar(v[0], 0.3)),
        case(
            "relu",
            |r| vec![away_from(r, &[2, 5], &[0.0], 1e-3)],
            |g, v| g.relu(v[0]),
        ),
        case("silu", single, |g, v| g.silu(v[0])),
        case("sigmoid", single, |g, v| g.sigmoid(v[0])),
        case("tanh", single, |g, v| g.tanh(v[0])),
        case(
            "clamp",
            |r| vec![away_from(r, &[3, 4], &[-0.5, 0.5], 1e-3)],
            |g, v| g.clamp(v[0], -0.5, 0.5),
        ),
        case("sum", single, |g, v| g.sum(v[0])),
        case("mean", single, |g, v| g.mean(v[0])),
        case("mse_loss", pair, |g, v| g.mse_loss(v[0], v[1])),
        case(
            "reshape",
            |r| vec![randn(r, &[2, 3, 2])],
            |g, v| g.reshape(v[0], &[3, 4]),
        ),
        case(
            "permute",
            |r| {
                let shape = [dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3), 2];
                vec![randn(r, &shape)]
            },
            |g, v| g.permute(v[0], &[2, 0, 3, 1]),
        ),
        case(
            "concat",
            |r| {
                let (n, h, w) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3));
                let (c1, c2) = (dim(r, 1, 3), dim(r, 1, 3));
                vec![randn(r, &[n, c1, h, w]), randn(r, &[n, c2, h, w])]
            },
            |g, v| g.concat(&[v[0], v[1]], 1),
        ),
        case(
            "linear",
            |r| {
                let (n, i, o) = (dim(r, 1, 4), dim(r, 1, 5), dim(r, 1, 4));
                vec![randn(r, &[n, i]), randn(r, &[o, i]), randn(r, &[o])]
            },
            |g, v| g.linear(v[0], v[1], Some(v[2])),
        ),
        case(
            "bmm",
            |r| {
                let (b, m, k, n) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 3));
                vec![randn(r, &[b, m, k]), randn(r, &[b, k, n])]
            },
            |g, v| g.bmm(v[0], v[1]),
        ),
        case(
            "conv2d",
            |r| {
                let c = dim(r, 1, 3);
                let x = image(r, c, false);
                let k = dim(r, 1, 3).min(x.shape()[2]).min(x.shape()[3]);
                let o = dim(r, 1, 3);
                vec![x, randn(r, &[o, c, k, k]), randn(r, &[o])]
            },
            |g, v| {
                let k = g.shape(v[1])[2];
                let stride = 1 + (g.shape(v[0])[2] % 2);
                g.conv2d(v[0], v[1], Some(v[2]), stride, k / 2)
            },
        ),
        case(
            "conv_transpose2d",
            |r| {
                let c = dim(r, 1, 3);
                let shape = [dim(r, 1, 2), c, dim(r, 1, 4), dim(r, 1, 4)];
                let x = randn(r, &shape);
                let o = dim(r, 1, 3);
                vec![x, randn(r, &[c, o, 4, 4]), randn(r, &[o])]
            },
            |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1),
        ),
        case(
            "group_norm",
            |r| {
                let groups = dim(r, 1, 3);
                let c = groups * dim(r, 1, 2);
                let shape = [dim(r, 1, 2), c, dim(r, 1, 3), dim(r, 2, 3)];
                let mut x = randn(r, &shape);
                x.data_mut()[0] = groups as f64 * 0.25;
                vec![x, randn(r, &[c]), randn(r, &[c])]
            },
            |g, v| {
                let groups = (g.value(v[0]).data()[0] * 4.0).round() as usize;
                g.group_norm(v[0], v[1], v[2], groups)
            },
        ),
        case(
            "avg_pool",
            |r| vec![image(r, 2, true)],
            |g, v| g.avg_pool(v[0], 2),
        ),
        case(
            "global_avg_pool",
            |r| vec![image(r, 3, false)],
            |g, v| g.global_avg_pool(v[0]),
        ),
        case(
            "upsample_nearest",
            |r| vec![image(r, 2, false)],
            |g, v| g.upsample_nearest(v[0], 2),
        ),
        case("softmax", single, |g, v| g.softmax(v[0])),
        case(
            "add_channel",
            |r| {
                let c = dim(r, 1, 3);
                let x = image(r, c, false);
                let v = randn(r, &x.shape()[..2]);
                vec![x, v]
            },
            |g, v| g.add_channel(v[0], v[1]),
        ),
        case(
            "mul_channel",
            |r| {
                let c = dim(r, 1, 3);
                let x = image(r, c, false);
                let s = randn(r, &x.shape()[..2]);
                vec![x, s]
            },
            |g, v| g.mul_channel(v[0], v[1]),
        ),
        case(
            "power_normalize",
            |r| {
                let shape = [dim(r, 1, 3), 2 * dim(r, 1, 4)];
                vec![randn(r, &shape)]
            },
            |g, v| g.power_normalize(v[0], 3.0),
        ),
        case(
            "complex_scale",
            |r| {
                let k = dim(r, 1, 4);
                vec![randn(r, &[2, 2 * k])]
            },
            |g, v| g.complex_scale(v[0], &[(0.6, -1.3), (-0.2, 0.9)]),
        ),
        case(
            "embedding",
            |r| {
                let e = dim(r, 1, 5);
                vec![randn(r, &[4, e])]
            },
            |g, v| g.embedding(v[0], &[2, 0, 2, 3]),
        ),
    ]
}
