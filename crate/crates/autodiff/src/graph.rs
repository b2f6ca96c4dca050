//! Define-by-run tape with reverse-mode differentiation.
//!
//! Every op appends one node whose id is larger than the ids of its inputs,
//! so the node order is already a topological order and `backward` is a
//! single reverse sweep.

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeometry};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Relu(Var),
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Clamp(Var, S, S),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Linear(Var, Var, Option<Var>),
    Bmm(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    AvgPool(Var, usize),
    GlobalAvgPool(Var),
    Upsample(Var, usize),
    Softmax(Var),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    PowerNormalize(Var, S, Vec<S>),
    ComplexScale(Var, Vec<(S, S)>),
    Embedding(Var, Vec<usize>),
    MseLoss(Var, Var),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        msg: msg.into(),
    }
}

fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(invalid(
            op,
            format!("expected rank {rank}, got shape {shape:?}"),
        ));
    }
    Ok(())
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the graph can be rebuilt.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    fn node(&self, v: Var) -> Result<&Node<S>> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<S>,
        op: Op<S>,
        requires_grad: bool,
    ) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check(&self, vars: &[Var]) -> Result<()> {
        for &v in vars {
            self.node(v)?;
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        self.check(&[a, b])?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(name, va.shape(), vb.shape()));
        }
        let out = va.zip_map(vb, f)?;
        let rg = self.any_grad(&[a, b]);
        self.push(name, out, op, rg)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        self.check(&[a])?;
        let out = self.value(a).map(f);
        let rg = self.any_grad(&[a]);
        self.push(name, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(S::zero()), Op::Relu(a))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary("silu", a, |x| x / (S::one() + (-x).exp()), Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "sigmoid",
            a,
            |x| S::one() / (S::one() + (-x).exp()),
            Op::Sigmoid(a),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, |x| x.tanh(), Op::Tanh(a))
    }

    /// Clamps to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Result<Var> {
        self.unary("clamp", a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let s = self.value(a).data().iter().copied().sum::<S>();
        let rg = self.any_grad(&[a]);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let v = self.value(a);
        let n = S::of(v.numel() as f64);
        let s = v.data().iter().copied().sum::<S>() / n;
        let rg = self.any_grad(&[a]);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean squared difference, a scalar.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("mse_loss", va.shape(), vb.shape()));
        }
        let n = S::of(va.numel() as f64);
        let s = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<S>()
            / n;
        let rg = self.any_grad(&[a, b]);
        self.push("mse_loss", Tensor::scalar(s), Op::MseLoss(a, b), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(&[a])?;
        let out = self.value(a).reshape(shape)?;
        let rg = self.any_grad(&[a]);
        self.push("reshape", out, Op::Reshape(a), rg)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        self.check(&[a])?;
        let v = self.value(a);
        let mut seen = vec![false; v.rank()];
        if perm.len() != v.rank() || perm.iter().any(|&p| p >= v.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid(
                "permute",
                format!("{perm:?} is not a permutation of rank {}", v.rank()),
            ));
        }
        let (shape, data) = kernels::permute(v.data(), v.shape(), perm);
        let out = Tensor::from_vec(&shape, data)?;
        let rg = self.any_grad(&[a]);
        self.push("permute", out, Op::Permute(a, perm.to_vec()), rg)
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        self.check(inputs)?;
        let first = inputs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::from_vec(&shape, data)?;
        let rg = self.any_grad(inputs);
        self.push("concat", out, Op::Concat(inputs.to_vec(), axis), rg)
    }

    /// `x[..., I] * w[O, I]^T + b[O]`, applied over all leading axes.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let mut ids = vec![x, w];
        ids.extend(b);
        self.check(&ids)?;
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        expect_rank("linear", &ws, 2)?;
        let (o, i) = (ws[0], ws[1]);
        if xs.last() != Some(&i) {
            return Err(mismatch("linear", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(mismatch("linear bias", self.shape(b), &[o]));
            }
        }
        let m = self.value(x).numel() / i;
        let mut out = vec![S::zero(); m * o];
        kernels::matmul(self.value(x).data(), false, self.value(w).data(), true, m, i, o, &mut out, false);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bd).for_each(|(v, &bb)| *v = *v + bb);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = o;
        let out = Tensor::from_vec(&shape, out)?;
        let rg = self.any_grad(&ids);
        self.push("linear", out, Op::Linear(x, w, b), rg)
    }

    /// Batched matrix product `[B,M,K] x [B,K,N] -> [B,M,N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        expect_rank("bmm", &sa, 3)?;
        expect_rank("bmm", &sb, 3)?;
        if sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(mismatch("bmm", &sa, &sb));
        }
        let (bn, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![S::zero(); bn * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bn {
            kernels::matmul(
                &da[i * m * k..],
                false,
                &db[i * k * n..],
                false,
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let out = Tensor::from_vec(&[bn, m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        self.push("bmm", out, Op::Bmm(a, b), rg)
    }

    /// Cross-correlation of `x[N,C,H,W]` with `w[O,C,kH,kW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let mut ids = vec![x, w];
        ids.extend(b);
        self.check(&ids)?;
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        expect_rank("conv2d input", &xs, 4)?;
        expect_rank("conv2d weight", &ws, 4)?;
        if xs[1] != ws[1] {
            return Err(invalid(
                "conv2d",
                format!("input has {} channels but weight {:?} expects {}", xs[1], ws, ws[1]),
            ));
        }
        let geom = ConvGeometry::new(xs[1], xs[2], xs[3], ws[2], ws[3], stride, pad).ok_or_else(|| {
            invalid(
                "conv2d",
                format!("kernel {}x{} stride {stride} pad {pad} does not fit input {xs:?}", ws[2], ws[3]),
            )
        })?;
        let o = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(mismatch("conv2d bias", self.shape(b), &[o]));
            }
        }
        let (n, in_len) = (xs[0], xs[1] * xs[2] * xs[3]);
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let cols = batch_im2col(self.value(x).data(), &geom, n, in_len);
        let mut out_t = vec![S::zero(); o * n * cols_n];
        kernels::matmul(self.value(w).data(), false, &cols, false, o, rows, n * cols_n, &mut out_t, false);
        let mut out = kernels::swap_leading(&out_t, o, n, cols_n);
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), cols_n);
        }
        let out = Tensor::from_vec(&[n, o, geom.out_h, geom.out_w], out)?;
        let rg = self.any_grad(&ids);
        self.push("conv2d", out, Op::Conv2d { x, w, b, geom }, rg)
    }

    /// Transposed convolution, `w[C_in, C_out, kH, kW]`; output side is
    /// `(H-1)*stride - 2*pad + kH`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let mut ids = vec![x, w];
        ids.extend(b);
        self.check(&ids)?;
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        expect_rank("conv_transpose2d input", &xs, 4)?;
        expect_rank("conv_transpose2d weight", &ws, 4)?;
        if xs[1] != ws[0] {
            return Err(invalid(
                "conv_transpose2d",
                format!("input has {} channels but weight {:?} expects {}", xs[1], ws, ws[0]),
            ));
        }
        if stride == 0 {
            return Err(invalid("conv_transpose2d", "stride must be >= 1"));
        }
        let full_h = (xs[2] - 1) * stride + ws[2];
        let full_w = (xs[3] - 1) * stride + ws[3];
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(invalid("conv_transpose2d", format!("pad {pad} too large for {xs:?}")));
        }
        let (oh, ow, co) = (full_h - 2 * pad, full_w - 2 * pad, ws[1]);
        let geom = ConvGeometry::new(co, oh, ow, ws[2], ws[3], stride, pad)
            .filter(|g| g.out_h == xs[2] && g.out_w == xs[3])
            .ok_or_else(|| invalid("conv_transpose2d", "inconsistent geometry"))?;
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(mismatch("conv_transpose2d bias", self.shape(b), &[co]));
            }
        }
        let (n, ci, in_sp) = (xs[0], xs[1], xs[2] * xs[3]);
        let rows = geom.col_rows();
        let out_len = co * oh * ow;
        let xt = kernels::swap_leading(self.value(x).data(), n, ci, in_sp);
        let mut cols = vec![S::zero(); rows * n * in_sp];
        kernels::matmul(self.value(w).data(), true, &xt, false, rows, ci, n * in_sp, &mut cols, false);
        let mut out = vec![S::zero(); n * out_len];
        for (i, dst) in out.chunks_mut(out_len).enumerate() {
            kernels::col2im_strided(&cols[i * in_sp..], &geom, dst, n * in_sp);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), oh * ow);
        }
        let out = Tensor::from_vec(&[n, co, oh, ow], out)?;
        let rg = self.any_grad(&ids);
        self.push("conv_transpose2d", out, Op::ConvTranspose2d { x, w, b, geom }, rg)
    }

    /// Group normalization over `[N,C,...]` with per-channel affine, eps 1e-5.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        self.check(&[x, gamma, beta])?;
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(invalid("group_norm", format!("need [N,C,...], got {xs:?}")));
        }
        let c = xs[1];
        if groups == 0 || c % groups != 0 {
            return Err(invalid(
                "group_norm",
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("group_norm affine", self.shape(gamma), &[c]));
        }
        let spatial: usize = xs[2..].iter().product();
        let group_len = c / groups * spatial;
        let eps = S::of(1e-5);
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![S::zero(); xd.len()];
        let mut rstd = Vec::with_capacity(xs[0] * groups);
        let mut out = vec![S::zero(); xd.len()];
        let len = S::of(group_len as f64);
        for (gi, chunk) in xd.chunks(group_len).enumerate() {
            let mean = chunk.iter().copied().sum::<S>() / len;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / len;
            let r = S::one() / (var + eps).sqrt();
            rstd.push(r);
            let base = gi * group_len;
            for (j, &v) in chunk.iter().enumerate() {
                let ch = ((base + j) / spatial) % c;
                let h = (v - mean) * r;
                xhat[base + j] = h;
                out[base + j] = h * gd[ch] + bd[ch];
            }
        }
        let out = Tensor::from_vec(&xs, out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(
            "group_norm",
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Non-overlapping `k x k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        self.check(&[x])?;
        let xs = self.shape(x).to_vec();
        expect_rank("avg_pool", &xs, 4)?;
        if k == 0 || xs[2] % k != 0 || xs[3] % k != 0 {
            return Err(invalid("avg_pool", format!("{xs:?} not divisible by window {k}")));
        }
        let (h, w, oh, ow) = (xs[2], xs[3], xs[2] / k, xs[3] / k);
        let xd = self.value(x).data();
        let inv = S::one() / S::of((k * k) as f64);
        let mut out = vec![S::zero(); xs[0] * xs[1] * oh * ow];
        for (p, plane) in xd.chunks(h * w).enumerate() {
            for y in 0..h {
                for xx in 0..w {
                    let o = p * oh * ow + (y / k) * ow + xx / k;
                    out[o] = out[o] + plane[y * w + xx] * inv;
                }
            }
        }
        let out = Tensor::from_vec(&[xs[0], xs[1], oh, ow], out)?;
        let rg = self.any_grad(&[x]);
        self.push("avg_pool", out, Op::AvgPool(x, k), rg)
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let xs = self.shape(x).to_vec();
        expect_rank("global_avg_pool", &xs, 4)?;
        let sp = xs[2] * xs[3];
        let inv = S::one() / S::of(sp as f64);
        let out: Vec<S> = self
            .value(x)
            .data()
            .chunks(sp)
            .map(|p| p.iter().copied().sum::<S>() * inv)
            .collect();
        let out = Tensor::from_vec(&[xs[0], xs[1]], out)?;
        let rg = self.any_grad(&[x]);
        self.push("global_avg_pool", out, Op::GlobalAvgPool(x), rg)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, k: usize) -> Result<Var> {
        self.check(&[x])?;
        let xs = self.shape(x).to_vec();
        expect_rank("upsample_nearest", &xs, 4)?;
        if k == 0 {
            return Err(invalid("upsample_nearest", "factor must be >= 1"));
        }
        let (h, w, oh, ow) = (xs[2], xs[3], xs[2] * k, xs[3] * k);
        let mut out = Vec::with_capacity(xs[0] * xs[1] * oh * ow);
        for plane in self.value(x).data().chunks(h * w) {
            for y in 0..oh {
                for xx in 0..ow {
                    out.push(plane[(y / k) * w + xx / k]);
                }
            }
        }
        let out = Tensor::from_vec(&[xs[0], xs[1], oh, ow], out)?;
        let rg = self.any_grad(&[x]);
        self.push("upsample_nearest", out, Op::Upsample(x, k), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| invalid("softmax", "rank-0 input"))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z = z + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / z);
        }
        let out = Tensor::from_vec(&xs, out)?;
        let rg = self.any_grad(&[x]);
        self.push("softmax", out, Op::Softmax(x), rg)
    }

    fn channel_operands(&self, op: &'static str, x: Var, v: Var) -> Result<(usize, usize)> {
        let (xs, vs) = (self.shape(x), self.shape(v));
        if xs.len() < 2 || vs.len() != 2 || xs[0] != vs[0] || xs[1] != vs[1] {
            return Err(mismatch(op, xs, vs));
        }
        Ok((xs[0] * xs[1], xs[2..].iter().product()))
    }

    /// `x[N,C,...] + v[N,C]` broadcast over trailing axes.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        self.check(&[x, v])?;
        let (planes, sp) = self.channel_operands("add_channel", x, v)?;
        let mut out = self.value(x).data().to_vec();
        let vd = self.value(v).data();
        for p in 0..planes {
            out[p * sp..(p + 1) * sp].iter_mut().for_each(|o| *o = *o + vd[p]);
        }
        let out = Tensor::from_vec(self.shape(x), out)?;
        let rg = self.any_grad(&[x, v]);
        self.push("add_channel", out, Op::AddChannel(x, v), rg)
    }

    /// `x[N,C,...] * s[N,C]` broadcast over trailing axes.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check(&[x, s])?;
        let (planes, sp) = self.channel_operands("mul_channel", x, s)?;
        let mut out = self.value(x).data().to_vec();
        let sd = self.value(s).data();
        for p in 0..planes {
            out[p * sp..(p + 1) * sp].iter_mut().for_each(|o| *o = *o * sd[p]);
        }
        let out = Tensor::from_vec(self.shape(x), out)?;
        let rg = self.any_grad(&[x, s]);
        self.push("mul_channel", out, Op::MulChannel(x, s), rg)
    }

    /// Rescales every row of `x[N, L]` to squared norm `energy`.
    pub fn power_normalize(&mut self, x: Var, energy: S) -> Result<Var> {
        self.check(&[x])?;
        let xs = self.shape(x).to_vec();
        expect_rank("power_normalize", &xs, 2)?;
        let target = energy.sqrt();
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(xs[0]);
        for row in out.chunks_mut(xs[1]) {
            let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            if norm <= S::zero() {
                return Err(invalid("power_normalize", "row has zero energy"));
            }
            norms.push(norm);
            let f = target / norm;
            row.iter_mut().for_each(|v| *v = *v * f);
        }
        let out = Tensor::from_vec(&xs, out)?;
        let rg = self.any_grad(&[x]);
        self.push("power_normalize", out, Op::PowerNormalize(x, target, norms), rg)
    }

    /// Multiplies interleaved `(re, im)` pairs of row `i` by complex `gains[i]`.
    pub fn complex_scale(&mut self, x: Var, gains: &[(S, S)]) -> Result<Var> {
        self.check(&[x])?;
        let xs = self.shape(x).to_vec();
        let n = xs.first().copied().unwrap_or(0);
        let row: usize = xs[1..].iter().product();
        if xs.len() < 2 || row % 2 != 0 || gains.len() != n {
            return Err(invalid(
                "complex_scale",
                format!("shape {xs:?} with {} gains", gains.len()),
            ));
        }
        let mut out = self.value(x).data().to_vec();
        for (chunk, &(a, b)) in out.chunks_mut(row).zip(gains) {
            for pair in chunk.chunks_mut(2) {
                let (re, im) = (pair[0], pair[1]);
                pair[0] = a * re - b * im;
                pair[1] = b * re + a * im;
            }
        }
        let out = Tensor::from_vec(&xs, out)?;
        let rg = self.any_grad(&[x]);
        self.push("complex_scale", out, Op::ComplexScale(x, gains.to_vec()), rg)
    }

    /// Row lookup `table[L,E] -> [ids.len(), E]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check(&[table])?;
        let ts = self.shape(table).to_vec();
        expect_rank("embedding", &ts, 2)?;
        let out = self
            .value(table)
            .select_outer(ids)
            .map_err(|_| invalid("embedding", format!("ids {ids:?} outside table of {} rows", ts[0])))?;
        let rg = self.any_grad(&[table]);
        self.push("embedding", out, Op::Embedding(table, ids.to_vec()), rg)
    }

    /// Reverse sweep from a scalar `loss`. Consumes the graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        let shape = self.node(loss)?.value.shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(&shape));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                for (var, contrib) in self.local_grads(i, &g)? {
                    accumulate(&mut grads[var.0], contrib);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, i: usize, g: &Tensor<S>) -> Result<Vec<(Var, Tensor<S>)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        let mut emit = |v: Var, t: Tensor<S>| {
            if need(v) {
                out.push((v, t));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(*a, g.clone());
                emit(*b, g.clone());
            }
            Op::Sub(a, b) => {
                emit(*a, g.clone());
                emit(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    emit(*a, g.zip_map(val(*b), |g, y| g * y)?);
                }
                if need(*b) {
                    emit(*b, g.zip_map(val(*a), |g, x| g * x)?);
                }
            }
            Op::Scale(a, c) => emit(*a, g.map(|v| v * *c)),
            Op::AddScalar(a) => emit(*a, g.clone()),
            Op::Relu(a) => emit(
                *a,
                g.zip_map(val(*a), |g, x| if x > S::zero() { g } else { S::zero() })?,
            ),
            Op::Silu(a) => emit(
                *a,
                g.zip_map(val(*a), |g, x| {
                    let s = S::one() / (S::one() + (-x).exp());
                    g * s * (S::one() + x * (S::one() - s))
                })?,
            ),
            Op::Sigmoid(a) => emit(*a, g.zip_map(y, |g, y| g * y * (S::one() - y))?),
            Op::Tanh(a) => emit(*a, g.zip_map(y, |g, y| g * (S::one() - y * y))?),
            Op::Clamp(a, lo, hi) => emit(
                *a,
                g.zip_map(val(*a), |g, x| {
                    if x >= *lo && x <= *hi {
                        g
                    } else {
                        S::zero()
                    }
                })?,
            ),
            Op::Sum(a) => emit(*a, Tensor::full(val(*a).shape(), g.data()[0])),
            Op::Mean(a) => {
                let n = S::of(val(*a).numel() as f64);
                emit(*a, Tensor::full(val(*a).shape(), g.data()[0] / n));
            }
            Op::MseLoss(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let f = S::of(2.0) * g.data()[0] / S::of(va.numel() as f64);
                let d = va.zip_map(vb, |x, y| (x - y) * f)?;
                if need(*b) {
                    emit(*b, d.map(|v| -v));
                }
                emit(*a, d);
            }
            Op::Reshape(a) => emit(*a, g.reshape(val(*a).shape())?),
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (shape, data) = kernels::permute(g.data(), g.shape(), &inv);
                emit(*a, Tensor::from_vec(&shape, data)?);
            }
            Op::Concat(inputs, axis) => {
                let outer: usize = y.shape()[..*axis].iter().product();
                let inner: usize = y.shape()[axis + 1..].iter().product();
                let total = y.shape()[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = val(v).shape()[*axis] * inner;
                    if need(v) {
                        let mut data = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            data.extend_from_slice(&g.data()[o * total + offset..o * total + offset + len]);
                        }
                        emit(v, Tensor::from_vec(val(v).shape(), data)?);
                    }
                    offset += len;
                }
            }
            Op::Linear(x, w, b) => {
                let (o, i) = (val(*w).shape()[0], val(*w).shape()[1]);
                let m = val(*x).numel() / i;
                if need(*x) {
                    let mut dx = vec![S::zero(); m * i];
                    kernels::matmul(g.data(), false, val(*w).data(), false, m, o, i, &mut dx, false);
                    emit(*x, Tensor::from_vec(val(*x).shape(), dx)?);
                }
                if need(*w) {
                    let mut dw = vec![S::zero(); o * i];
                    kernels::matmul(g.data(), true, val(*x).data(), false, o, m, i, &mut dw, false);
                    emit(*w, Tensor::from_vec(&[o, i], dw)?);
                }
                if let Some(b) = b {
                    if need(*b) {
                        let mut db = vec![S::zero(); o];
                        for row in g.data().chunks(o) {
                            db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                        }
                        emit(*b, Tensor::from_vec(&[o], db)?);
                    }
                }
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (bn, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if need(*a) {
                    let mut da = vec![S::zero(); bn * m * k];
                    for i in 0..bn {
                        kernels::matmul(
                            &g.data()[i * m * n..],
                            false,
                            &val(*b).data()[i * k * n..],
                            true,
                            m,
                            n,
                            k,
                            &mut da[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    emit(*a, Tensor::from_vec(sa, da)?);
                }
                if need(*b) {
                    let mut db = vec![S::zero(); bn * k * n];
                    for i in 0..bn {
                        kernels::matmul(
                            &val(*a).data()[i * m * k..],
                            true,
                            &g.data()[i * m * n..],
                            false,
                            k,
                            m,
                            n,
                            &mut db[i * k * n..(i + 1) * k * n],
                            false,
                        );
                    }
                    emit(*b, Tensor::from_vec(sb, db)?);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let xs = val(*x).shape();
                let o = val(*w).shape()[0];
                let (n, in_len) = (xs[0], xs[1] * xs[2] * xs[3]);
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let gt = kernels::swap_leading(g.data(), n, o, ncols);
                let mut dx = None;
                if need(*x) {
                    let mut dcols = vec![S::zero(); rows * n * ncols];
                    kernels::matmul(val(*w).data(), true, &gt, false, rows, o, n * ncols, &mut dcols, false);
                    let mut d = vec![S::zero(); val(*x).numel()];
                    for (i, dst) in d.chunks_mut(in_len).enumerate() {
                        kernels::col2im_strided(&dcols[i * ncols..], geom, dst, n * ncols);
                    }
                    dx = Some(d);
                }
                let mut dw = None;
                if need(*w) {
                    let cols = batch_im2col(val(*x).data(), geom, n, in_len);
                    let mut d = vec![S::zero(); val(*w).numel()];
                    kernels::matmul(&gt, false, &cols, true, o, n * ncols, rows, &mut d, false);
                    dw = Some(d);
                }
                if let Some(dx) = dx {
                    emit(*x, Tensor::from_vec(xs, dx)?);
                }
                if let Some(dw) = dw {
                    emit(*w, Tensor::from_vec(val(*w).shape(), dw)?);
                }
                if let Some(b) = b {
                    if need(*b) {
                        emit(*b, channel_sums(g, o, ncols));
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let xs = val(*x).shape();
                let (n, ci, in_sp) = (xs[0], xs[1], xs[2] * xs[3]);
                let rows = geom.col_rows();
                let out_len = geom.channels * geom.height * geom.width;
                let cols = batch_im2col(g.data(), geom, n, out_len);
                let mut dx = None;
                if need(*x) {
                    let mut dxt = vec![S::zero(); ci * n * in_sp];
                    kernels::matmul(val(*w).data(), false, &cols, false, ci, rows, n * in_sp, &mut dxt, false);
                    dx = Some(kernels::swap_leading(&dxt, ci, n, in_sp));
                }
                let mut dw = None;
                if need(*w) {
                    let xt = kernels::swap_leading(val(*x).data(), n, ci, in_sp);
                    let mut d = vec![S::zero(); val(*w).numel()];
                    kernels::matmul(&xt, false, &cols, true, ci, n * in_sp, rows, &mut d, false);
                    dw = Some(d);
                }
                if let Some(dx) = dx {
                    emit(*x, Tensor::from_vec(xs, dx)?);
                }
                if let Some(dw) = dw {
                    emit(*w, Tensor::from_vec(val(*w).shape(), dw)?);
                }
                if let Some(b) = b {
                    if need(*b) {
                        emit(*b, channel_sums(g, geom.channels, geom.height * geom.width));
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let xs = val(*x).shape();
                let c = xs[1];
                let spatial: usize = xs[2..].iter().product();
                let group_len = c / groups * spatial;
                let gd = val(*gamma).data();
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                let mut dx = vec![S::zero(); xhat.len()];
                let len = S::of(group_len as f64);
                for (gi, &r) in rstd.iter().enumerate() {
                    let base = gi * group_len;
                    let mut sum_d = S::zero();
                    let mut sum_dx = S::zero();
                    for j in base..base + group_len {
                        let ch = (j / spatial) % c;
                        let gv = g.data()[j];
                        dgamma[ch] = dgamma[ch] + gv * xhat[j];
                        dbeta[ch] = dbeta[ch] + gv;
                        let d = gv * gd[ch];
                        sum_d = sum_d + d;
                        sum_dx = sum_dx + d * xhat[j];
                    }
                    let (mean_d, mean_dx) = (sum_d / len, sum_dx / len);
                    for j in base..base + group_len {
                        let ch = (j / spatial) % c;
                        let d = g.data()[j] * gd[ch];
                        dx[j] = r * (d - mean_d - xhat[j] * mean_dx);
                    }
                }
                emit(*x, Tensor::from_vec(xs, dx)?);
                emit(*gamma, Tensor::from_vec(&[c], dgamma)?);
                emit(*beta, Tensor::from_vec(&[c], dbeta)?);
            }
            Op::AvgPool(x, k) => {
                let xs = val(*x).shape();
                let (h, w, ow) = (xs[2], xs[3], xs[3] / k);
                let oh = h / k;
                let inv = S::one() / S::of((k * k) as f64);
                let mut dx = vec![S::zero(); val(*x).numel()];
                for (p, plane) in dx.chunks_mut(h * w).enumerate() {
                    for yy in 0..h {
                        for xx in 0..w {
                            plane[yy * w + xx] = g.data()[p * oh * ow + (yy / k) * ow + xx / k] * inv;
                        }
                    }
                }
                emit(*x, Tensor::from_vec(xs, dx)?);
            }
            Op::GlobalAvgPool(x) => {
                let xs = val(*x).shape();
                let sp = xs[2] * xs[3];
                let inv = S::one() / S::of(sp as f64);
                let dx: Vec<S> = g
                    .data()
                    .iter()
                    .flat_map(|&v| std::iter::repeat(v * inv).take(sp))
                    .collect();
                emit(*x, Tensor::from_vec(xs, dx)?);
            }
            Op::Upsample(x, k) => {
                let xs = val(*x).shape();
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (h * k, w * k);
                let mut dx = vec![S::zero(); val(*x).numel()];
                for (p, plane) in g.data().chunks(oh * ow).enumerate() {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let t = p * h * w + (yy / k) * w + xx / k;
                            dx[t] = dx[t] + plane[yy * ow + xx];
                        }
                    }
                }
                emit(*x, Tensor::from_vec(xs, dx)?);
            }
            Op::Softmax(x) => {
                let d = *y.shape().last().unwrap();
                let mut dx = vec![S::zero(); y.numel()];
                for ((dr, yr), gr) in dx.chunks_mut(d).zip(y.data().chunks(d)).zip(g.data().chunks(d)) {
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<S>();
                    for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                emit(*x, Tensor::from_vec(y.shape(), dx)?);
            }
            Op::AddChannel(x, v) => {
                emit(*x, g.clone());
                if need(*v) {
                    let planes = val(*v).numel();
                    let sp = g.numel() / planes;
                    let dv: Vec<S> = g.data().chunks(sp).map(|p| p.iter().copied().sum()).collect();
                    emit(*v, Tensor::from_vec(val(*v).shape(), dv)?);
                }
            }
            Op::MulChannel(x, s) => {
                let planes = val(*s).numel();
                let sp = g.numel() / planes;
                let sd = val(*s).data();
                if need(*x) {
                    let mut dx = g.data().to_vec();
                    for (p, plane) in dx.chunks_mut(sp).enumerate() {
                        plane.iter_mut().for_each(|v| *v = *v * sd[p]);
                    }
                    emit(*x, Tensor::from_vec(g.shape(), dx)?);
                }
                if need(*s) {
                    let ds: Vec<S> = g
                        .data()
                        .chunks(sp)
                        .zip(val(*x).data().chunks(sp))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                        .collect();
                    emit(*s, Tensor::from_vec(val(*s).shape(), ds)?);
                }
            }
            Op::PowerNormalize(x, target, norms) => {
                let xs = val(*x).shape();
                let l = xs[1];
                let mut dx = vec![S::zero(); val(*x).numel()];
                for (r, &norm) in norms.iter().enumerate() {
                    let xr = &val(*x).data()[r * l..(r + 1) * l];
                    let gr = &g.data()[r * l..(r + 1) * l];
                    let dot = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<S>();
                    let f = *target / norm;
                    let n2 = norm * norm;
                    for j in 0..l {
                        dx[r * l + j] = f * (gr[j] - xr[j] * dot / n2);
                    }
                }
                emit(*x, Tensor::from_vec(xs, dx)?);
            }
            Op::ComplexScale(x, gains) => {
                let row = g.numel() / gains.len();
                let mut dx = g.data().to_vec();
                for (chunk, &(a, b)) in dx.chunks_mut(row).zip(gains) {
                    for pair in chunk.chunks_mut(2) {
                        let (gr, gi) = (pair[0], pair[1]);
                        pair[0] = a * gr + b * gi;
                        pair[1] = a * gi - b * gr;
                    }
                }
                emit(*x, Tensor::from_vec(g.shape(), dx)?);
            }
            Op::Embedding(table, ids) => {
                let ts = val(*table).shape();
                let e = ts[1];
                let mut dt = vec![S::zero(); val(*table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..e {
                        dt[id * e + j] = dt[id * e + j] + g.data()[r * e + j];
                    }
                }
                emit(*table, Tensor::from_vec(ts, dt)?);
            }
        }
        Ok(out)
    }
}

/// Column matrix `[rows, n * out_hw]` for a batch of images.
fn batch_im2col<S: Scalar>(x: &[S], geom: &ConvGeometry, n: usize, in_len: usize) -> Vec<S> {
    let ncols = geom.col_cols();
    let mut cols = vec![S::zero(); geom.col_rows() * n * ncols];
    for i in 0..n {
        kernels::im2col_strided(&x[i * in_len..(i + 1) * in_len], geom, &mut cols[i * ncols..], n * ncols);
    }
    cols
}

fn add_channel_bias<S: Scalar>(out: &mut [S], bias: &[S], spatial: usize) {
    for (p, plane) in out.chunks_mut(spatial).enumerate() {
        let bb = bias[p % bias.len()];
        plane.iter_mut().for_each(|v| *v = *v + bb);
    }
}

fn channel_sums<S: Scalar>(g: &Tensor<S>, channels: usize, spatial: usize) -> Tensor<S> {
    let mut db = vec![S::zero(); channels];
    for (p, plane) in g.data().chunks(spatial).enumerate() {
        db[p % channels] = db[p % channels] + plane.iter().copied().sum::<S>();
    }
    Tensor::from_vec(&[channels], db).expect("channel count matches")
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, t: Tensor<S>) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(t.data())
            .for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(t),
    }
}
