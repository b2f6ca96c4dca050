//! Conditional denoiser: a small UNet (two resolutions, cross-attention to
//! the semantic embedding at the bottleneck) plus a trainable copy of its
//! encoder whose outputs enter the UNet through zero-initialized 1x1 convs.

use djscc_autodiff::nn::{Conv2d, GroupNorm, Linear};
use djscc_autodiff::{Bound, Graph, ParamStore, Scalar, Tensor, Var};

use crate::conditioning::{self, ConditionOptions, ConditionSet, CsiEmbedder, SemanticTable, CSI_FEATURES};
use crate::error::{CoreError, Result};
use crate::rng::{self, Rng};

pub const BASE: &str = "base";
pub const CONTROL: &str = "control";
pub const ZERO: &str = "zero";
pub const CSI: &str = "csi";
pub const TEXT: &str = "text";

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub widths: [usize; 2],
    pub temb_dim: usize,
    pub groups: usize,
    pub text_dim: usize,
    /// Real semantic classes; the table has one extra null row.
    pub classes: usize,
    pub snr_range_db: (f64, f64),
    pub options: ConditionOptions,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            widths: [32, 64],
            temb_dim: 64,
            groups: 8,
            text_dim: 64,
            classes: 8,
            snr_range_db: (0.0, 20.0),
            options: ConditionOptions::default(),
        }
    }
}

/// Sinusoidal embedding `[N, dim]` of integer timesteps.
pub fn timestep_embedding<S: Scalar>(t: &[usize], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        for i in 0..dim {
            let k = i % half.max(1);
            let w = 10000f64.powf(-(k as f64) / half.max(1) as f64);
            let a = step as f64 * w;
            data.push(S::of(if i < half { a.sin() } else { a.cos() }));
        }
    }
    Tensor::from_vec(&[t.len(), dim], data).expect("sized from t")
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, cin: usize, cout: usize, cfg: &DenoiserConfig, rng: &mut Rng) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, cfg.groups),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, 1, rng),
            temb: Linear::new(store, &format!("{name}.temb"), cfg.temb_dim, cout, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, cfg.groups),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, rng),
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, 0, rng)),
        }
    }

    /// `temb` is the already-activated embedding.
    fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var, temb: Var) -> Result<Var> {
        let mut h = self.norm1.forward(g, p, x)?;
        h = g.silu(h)?;
        h = self.conv1.forward(g, p, h)?;
        let shift = self.temb.forward(g, p, temb)?;
        h = g.add_channel(h, shift)?;
        h = self.norm2.forward(g, p, h)?;
        h = g.silu(h)?;
        h = self.conv2.forward(g, p, h)?;
        let res = match &self.skip {
            Some(c) => c.forward(g, p, x)?,
            None => x,
        };
        Ok(g.add(h, res)?)
    }
}

/// Single-head cross-attention from image positions to the text tokens.
#[derive(Clone, Debug)]
struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl CrossAttention {
    fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize, cfg: &DenoiserConfig, rng: &mut Rng) -> Self {
        Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels, cfg.groups),
            q: Linear::new(store, &format!("{name}.q"), channels, channels, rng),
            k: Linear::new(store, &format!("{name}.k"), cfg.text_dim, channels, rng),
            v: Linear::new(store, &format!("{name}.v"), cfg.text_dim, channels, rng),
            out: Linear::new(store, &format!("{name}.out"), channels, channels, rng),
        }
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var, f_t: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let h = self.norm.forward(g, p, x)?;
        let h = g.reshape(h, &[n, c, hw])?;
        let h = g.permute(h, &[0, 2, 1])?;
        let q = self.q.forward(g, p, h)?;
        let k = self.k.forward(g, p, f_t)?;
        let k = g.permute(k, &[0, 2, 1])?;
        let v = self.v.forward(g, p, f_t)?;
        let scores = g.bmm(q, k)?;
        let scores = g.scale(scores, S::of(1.0 / (c as f64).sqrt()))?;
        let attn = g.softmax(scores)?;
        let o = g.bmm(attn, v)?;
        let o = self.out.forward(g, p, o)?;
        let o = g.permute(o, &[0, 2, 1])?;
        let o = g.reshape(o, &[n, c, s[2], s[3]])?;
        Ok(g.add(x, o)?)
    }
}

/// Encoder and middle block; shared layout of the UNet and the control branch.
#[derive(Clone, Debug)]
struct Encoder {
    conv_in: Conv2d,
    res0: ResBlock,
    down: Conv2d,
    res1: ResBlock,
    mid_a: ResBlock,
    attn: CrossAttention,
    mid_b: ResBlock,
}

/// Skip activations `[s0, s1, s2, s3]` and the middle output.
struct EncoderOut {
    skips: [Var; 4],
    middle: Var,
}

impl Encoder {
    fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, cin: usize, cfg: &DenoiserConfig, rng: &mut Rng) -> Self {
        let [w0, w1] = cfg.widths;
        Self {
            conv_in: Conv2d::new(store, &format!("{name}.conv_in"), cin, w0, 3, 1, 1, rng),
            res0: ResBlock::new(store, &format!("{name}.res0"), w0, w0, cfg, rng),
            down: Conv2d::new(store, &format!("{name}.down"), w0, w0, 3, 2, 1, rng),
            res1: ResBlock::new(store, &format!("{name}.res1"), w0, w1, cfg, rng),
            mid_a: ResBlock::new(store, &format!("{name}.mid_a"), w1, w1, cfg, rng),
            attn: CrossAttention::new(store, &format!("{name}.attn"), w1, cfg, rng),
            mid_b: ResBlock::new(store, &format!("{name}.mid_b"), w1, w1, cfg, rng),
        }
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var, temb: Var, f_t: Var) -> Result<EncoderOut> {
        let s0 = self.conv_in.forward(g, p, x)?;
        let s1 = self.res0.forward(g, p, s0, temb)?;
        let s2 = self.down.forward(g, p, s1)?;
        let s3 = self.res1.forward(g, p, s2, temb)?;
        let m = self.mid_a.forward(g, p, s3, temb)?;
        let m = self.attn.forward(g, p, m, f_t)?;
        let middle = self.mid_b.forward(g, p, m, temb)?;
        Ok(EncoderOut {
            skips: [s0, s1, s2, s3],
            middle,
        })
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    dec1a: ResBlock,
    dec1b: ResBlock,
    up: Conv2d,
    dec0a: ResBlock,
    dec0b: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Decoder {
    fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, cfg: &DenoiserConfig, rng: &mut Rng) -> Self {
        let [w0, w1] = cfg.widths;
        Self {
            dec1a: ResBlock::new(store, &format!("{name}.dec1a"), w1 + w1, w1, cfg, rng),
            dec1b: ResBlock::new(store, &format!("{name}.dec1b"), w1 + w0, w1, cfg, rng),
            up: Conv2d::new(store, &format!("{name}.up"), w1, w1, 3, 1, 1, rng),
            dec0a: ResBlock::new(store, &format!("{name}.dec0a"), w1 + w0, w0, cfg, rng),
            dec0b: ResBlock::new(store, &format!("{name}.dec0b"), w0 + w0, w0, cfg, rng),
            norm_out: GroupNorm::new(store, &format!("{name}.norm_out"), w0, cfg.groups),
            conv_out: Conv2d::new(store, &format!("{name}.conv_out"), w0, cfg.latent_channels, 3, 1, 1, rng),
        }
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, enc: &EncoderOut, temb: Var) -> Result<Var> {
        let [s0, s1, s2, s3] = enc.skips;
        let h = g.concat(&[enc.middle, s3], 1)?;
        let h = self.dec1a.forward(g, p, h, temb)?;
        let h = g.concat(&[h, s2], 1)?;
        let h = self.dec1b.forward(g, p, h, temb)?;
        let h = g.upsample_nearest(h, 2)?;
        let h = self.up.forward(g, p, h)?;
        let h = g.concat(&[h, s1], 1)?;
        let h = self.dec0a.forward(g, p, h, temb)?;
        let h = g.concat(&[h, s0], 1)?;
        let h = self.dec0b.forward(g, p, h, temb)?;
        let h = self.norm_out.forward(g, p, h)?;
        let h = g.silu(h)?;
        Ok(self.conv_out.forward(g, p, h)?)
    }
}

/// Graph inputs of the condition set.
#[derive(Clone, Copy, Debug)]
pub struct CondVars {
    pub f_v: Var,
    pub f_t: Var,
    pub csi: Var,
}

/// Denoiser layout. Parameter names are prefixed `base.`, `control.`,
/// `zero.`, `csi.` and `text.` so training stages can freeze by prefix.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    time_in: Linear,
    time_out: Linear,
    base_enc: Encoder,
    base_dec: Decoder,
    control: Encoder,
    zero: [Conv2d; 5],
    csi: CsiEmbedder,
    pub text: SemanticTable,
}

impl Denoiser {
    pub fn new<S: Scalar>(config: DenoiserConfig, store: &mut ParamStore<S>, rng: &mut Rng) -> Result<Self> {
        let [w0, w1] = config.widths;
        if config.latent_channels == 0 || w0 == 0 || w1 == 0 || config.temb_dim == 0 || config.text_dim == 0 {
            return Err(CoreError::Config("denoiser dimensions must be positive".into()));
        }
        let c = config.latent_channels;
        let time_in = Linear::new(store, "base.time.in", w0, config.temb_dim, rng);
        let time_out = Linear::new(store, "base.time.out", config.temb_dim, config.temb_dim, rng);
        let base_enc = Encoder::new(store, "base.enc", c, &config, rng);
        let base_dec = Decoder::new(store, "base.dec", &config, rng);
        let control = Encoder::new(store, "control.enc", 2 * c, &config, rng);
        let zero = [
            Conv2d::zeros(store, "zero.s0", w0, w0, 1),
            Conv2d::zeros(store, "zero.s1", w0, w0, 1),
            Conv2d::zeros(store, "zero.s2", w0, w0, 1),
            Conv2d::zeros(store, "zero.s3", w1, w1, 1),
            Conv2d::zeros(store, "zero.mid", w1, w1, 1),
        ];
        let csi = CsiEmbedder::new(store, CSI, config.temb_dim, rng);
        let text = SemanticTable::new(store, TEXT, config.classes, config.text_dim, rng);
        Ok(Self {
            config,
            time_in,
            time_out,
            base_enc,
            base_dec,
            control,
            zero,
            csi,
            text,
        })
    }

    /// Copies the base encoder into the control branch. The `f_v` input
    /// channels of the control `conv_in` start at zero.
    pub fn init_control_from_base<S: Scalar>(&self, store: &mut ParamStore<S>) -> Result<()> {
        let c = self.config.latent_channels;
        let base: Vec<(String, Tensor<S>)> = store
            .entries()
            .iter()
            .filter_map(|e| e.name.strip_prefix("base.enc.").map(|s| (s.to_string(), e.value.clone())))
            .collect();
        for (suffix, value) in base {
            let id = store
                .find(&format!("control.enc.{suffix}"))
                .ok_or_else(|| CoreError::Config(format!("control branch lacks {suffix}")))?;
            let target = store.get_mut(id);
            if target.shape() == value.shape() {
                *target = value;
                continue;
            }
            // conv_in weight: [O, 2C, k, k] <- [O, C, k, k] with zeros for f_v.
            let (ts, vs) = (target.shape().to_vec(), value.shape().to_vec());
            if ts.len() != 4 || ts[1] != 2 * c || vs[1] != c || ts[0] != vs[0] {
                return Err(CoreError::Shape(format!("cannot copy {vs:?} into {ts:?}")));
            }
            let k = ts[2] * ts[3];
            let mut data = vec![S::zero(); target.numel()];
            for o in 0..ts[0] {
                let src = &value.data()[o * c * k..(o + 1) * c * k];
                data[o * 2 * c * k..o * 2 * c * k + c * k].copy_from_slice(src);
            }
            *target = Tensor::from_vec(&ts, data)?;
        }
        Ok(())
    }

    fn time_embedding<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, t: &[usize]) -> Result<Var> {
        let e = g.constant(timestep_embedding(t, self.config.widths[0]))?;
        let h = self.time_in.forward(g, p, e)?;
        let h = g.silu(h)?;
        Ok(self.time_out.forward(g, p, h)?)
    }

    fn check_latent<S: Scalar>(&self, g: &Graph<S>, z: Var, t: &[usize]) -> Result<()> {
        let s = g.shape(z);
        if s.len() != 4 || s[1] != self.config.latent_channels || s[2] % 2 != 0 || s[3] % 2 != 0 || s[0] != t.len() {
            return Err(CoreError::Shape(format!(
                "latent {s:?} with {} timesteps for {} channels",
                t.len(),
                self.config.latent_channels
            )));
        }
        Ok(())
    }

    /// Frozen-base prediction: `z_t`, time embedding and `f_t` only.
    pub fn base_forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, z_t: Var, t: &[usize], f_t: Var) -> Result<Var> {
        self.check_latent(g, z_t, t)?;
        let temb = self.time_embedding(g, p, t)?;
        let temb = g.silu(temb)?;
        let enc = self.base_enc.forward(g, p, z_t, temb, f_t)?;
        self.base_dec.forward(g, p, &enc, temb)
    }

    /// Full conditional prediction: the control branch sees `concat(z_t, f_v)`
    /// and `time + csi` embeddings; its outputs pass through the zero convs
    /// into the UNet skips and middle block.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, z_t: Var, t: &[usize], cond: &CondVars) -> Result<Var> {
        self.check_latent(g, z_t, t)?;
        if g.shape(cond.f_v) != g.shape(z_t) {
            return Err(CoreError::Shape(format!(
                "f_v {:?} does not match z_t {:?}",
                g.shape(cond.f_v),
                g.shape(z_t)
            )));
        }
        let temb = self.time_embedding(g, p, t)?;
        let base_temb = g.silu(temb)?;
        let enc = self.base_enc.forward(g, p, z_t, base_temb, cond.f_t)?;

        let csi = self.csi.forward(g, p, cond.csi)?;
        let ctrl_temb = g.add(temb, csi)?;
        let ctrl_temb = g.silu(ctrl_temb)?;
        let hint = g.concat(&[z_t, cond.f_v], 1)?;
        let ctrl = self.control.forward(g, p, hint, ctrl_temb, cond.f_t)?;

        let mut skips = enc.skips;
        for (i, s) in skips.iter_mut().enumerate() {
            let c = self.zero[i].forward(g, p, ctrl.skips[i])?;
            *s = g.add(*s, c)?;
        }
        let c = self.zero[4].forward(g, p, ctrl.middle)?;
        let middle = g.add(enc.middle, c)?;
        self.base_dec.forward(g, p, &EncoderOut { skips, middle }, base_temb)
    }

    /// Puts a condition set on the graph. Disabled text maps to the null
    /// label; disabled CSI feeds a constant zero encoding.
    pub fn condition_vars<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, cond: &ConditionSet) -> Result<CondVars> {
        let opts = self.config.options;
        let f_v = g.constant(cond.f_v().cast())?;
        let labels: Vec<usize> = if opts.use_text {
            cond.labels().to_vec()
        } else {
            vec![self.text.null_label(); cond.len()]
        };
        let f_t = self.text.forward(g, p, &labels)?;
        let csi_t = if opts.use_csi {
            conditioning::csi_features(cond.states(), self.config.snr_range_db)
        } else {
            Tensor::zeros(&[cond.len(), CSI_FEATURES])
        };
        let csi = g.constant(csi_t)?;
        Ok(CondVars { f_v, f_t, csi })
    }

    /// Null text tokens `[N, 1, E]` used by unconditional base training.
    pub fn null_text<S: Scalar>(&self, n: usize) -> Tensor<S> {
        Tensor::zeros(&[n, 1, self.config.text_dim])
    }
}

pub fn is_base(name: &str) -> bool {
    name.starts_with("base.")
}

/// Parameters trained in the control stage.
pub fn is_control_stage(name: &str) -> bool {
    [CONTROL, ZERO, CSI, TEXT]
        .iter()
        .any(|p| name.strip_prefix(p).is_some_and(|rest| rest.starts_with('.')))
}

/// Denoiser layout plus its parameters.
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    pub net: Denoiser,
    pub params: ParamStore<f32>,
}

impl DenoiserModel {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut r = rng::stream(seed, 0, "denoiser/init");
        let net = Denoiser::new(config, &mut params, &mut r)?;
        Ok(Self { net, params })
    }

    pub fn base_checksum(&self) -> u64 {
        self.params.checksum(is_base)
    }

    pub fn control_checksum(&self) -> u64 {
        self.params.checksum(is_control_stage)
    }

    /// Unconditional base prediction with null text.
    pub fn predict_base(&self, z_t: &Tensor<f32>, t: &[usize]) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g)?;
        let z = g.constant(z_t.clone())?;
        let f_t = g.constant(self.net.null_text(t.len()))?;
        let out = self.net.base_forward(&mut g, &p, z, t, f_t)?;
        Ok(g.value(out).clone())
    }

    /// Base prediction with the condition set's text tokens (no control branch).
    pub fn predict_base_with_text(&self, z_t: &Tensor<f32>, t: &[usize], cond: &ConditionSet) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g)?;
        let z = g.constant(z_t.clone())?;
        let vars = self.net.condition_vars(&mut g, &p, cond)?;
        let out = self.net.base_forward(&mut g, &p, z, t, vars.f_t)?;
        Ok(g.value(out).clone())
    }

    /// Full conditional noise prediction.
    pub fn predict(&self, z_t: &Tensor<f32>, t: &[usize], cond: &ConditionSet) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g)?;
        let z = g.constant(z_t.clone())?;
        let vars = self.net.condition_vars(&mut g, &p, cond)?;
        let out = self.net.forward(&mut g, &p, z, t, &vars)?;
        Ok(g.value(out).clone())
    }
}
