//! SNR-adaptive convolutional JSCC encoder and decoder trained through a
//! differentiable channel.

use djscc_autodiff::nn::{Conv2d, ConvTranspose2d, Linear};
use djscc_autodiff::{Bound, Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng as _;

use crate::channel::{
    self, equalizer_gain, ChannelKind, ChannelState, ComplexSymbolVector,
};
use crate::data::ImageSet;
use crate::error::{CoreError, Result};
use crate::rng::{self, Rng};
use crate::train::{self, BatchSampler, TrainConfig, TrainReport};

#[derive(Clone, Debug, PartialEq)]
pub struct JsccConfig {
    /// Channels of the last encoder feature map; two reals per complex symbol.
    pub c_out: usize,
    /// Number of stride-2 stages.
    pub downsampling: usize,
    pub base_width: usize,
    pub snr_range_db: (f64, f64),
    pub channel_kind: ChannelKind,
    /// `E|h|^2` for Rayleigh fading.
    pub gain_variance: f64,
    /// Average symbol power.
    pub power: f64,
}

impl Default for JsccConfig {
    fn default() -> Self {
        Self {
            c_out: 16,
            downsampling: 2,
            base_width: 32,
            snr_range_db: (0.0, 20.0),
            channel_kind: ChannelKind::Awgn,
            gain_variance: 1.0,
            power: 1.0,
        }
    }
}

impl JsccConfig {
    pub fn validate(&self) -> Result<()> {
        rate_for_config(self.c_out, self.downsampling)?;
        if self.base_width == 0 {
            return Err(CoreError::Config("base_width must be positive".into()));
        }
        let (lo, hi) = self.snr_range_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(CoreError::Config(format!("bad SNR range [{lo}, {hi}]")));
        }
        if !(self.power > 0.0 && self.gain_variance > 0.0) {
            return Err(CoreError::Config("power and gain variance must be positive".into()));
        }
        Ok(())
    }

    pub fn rate(&self) -> Result<f64> {
        rate_for_config(self.c_out, self.downsampling)
    }

    pub fn symbols_per_image(&self, h: usize, w: usize) -> Result<usize> {
        symbols_for_image(self.c_out, self.downsampling, h, w)
    }

    fn stage_width(&self, i: usize) -> usize {
        self.base_width << i.min(2)
    }
}

/// `rho = C_out / (3 * 2^(2D + 1))`.
pub fn rate_for_config(c_out: usize, downsampling: usize) -> Result<f64> {
    if c_out < 2 || c_out % 2 != 0 {
        return Err(CoreError::Config(format!("C_out must be even and >= 2, got {c_out}")));
    }
    if downsampling == 0 || downsampling > 16 {
        return Err(CoreError::Config(format!("downsampling must be in 1..=16, got {downsampling}")));
    }
    Ok(c_out as f64 / (3u64 << (2 * downsampling + 1)) as f64)
}

/// `K = C_out * (H / 2^D) * (W / 2^D) / 2`.
pub fn symbols_for_image(c_out: usize, downsampling: usize, h: usize, w: usize) -> Result<usize> {
    rate_for_config(c_out, downsampling)?;
    let f = 1usize << downsampling;
    if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
        return Err(CoreError::Shape(format!("{h}x{w} is not divisible by 2^{downsampling}")));
    }
    Ok(c_out * (h / f) * (w / f) / 2)
}

/// Squeeze-excitation gate conditioned on channel state.
#[derive(Clone, Copy, Debug)]
pub struct SeBlock {
    pub hidden: Linear,
    pub gate: Linear,
}

impl SeBlock {
    pub const CSI_FEATURES: usize = 3;

    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize, rng: &mut Rng) -> Self {
        let hidden = (channels / 4).max(8);
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), channels + Self::CSI_FEATURES, hidden, rng),
            gate: Linear::new(store, &format!("{name}.gate"), hidden, channels, rng),
        }
    }

    /// `features * sigmoid(MLP([pool(features) ; csi]))` per channel.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var, csi: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(x)?;
        let input = g.concat(&[pooled, csi], 1)?;
        let h = self.hidden.forward(g, p, input)?;
        let h = g.relu(h)?;
        let logits = self.gate.forward(g, p, h)?;
        let scale = g.sigmoid(logits)?;
        Ok(g.mul_channel(x, scale)?)
    }
}

/// Free-function form of [`SeBlock::forward`].
pub fn se_condition<S: Scalar>(
    g: &mut Graph<S>,
    p: &Bound,
    block: &SeBlock,
    features: Var,
    csi: Var,
) -> Result<Var> {
    block.forward(g, p, features, csi)
}

/// Per-image channel realization in graph form.
#[derive(Clone, Debug)]
pub struct ChannelBatch<S> {
    pub gains: Vec<(S, S)>,
    pub equalizers: Vec<(S, S)>,
    /// Noise `[N, 2K]` in interleaved (re, im) layout.
    pub noise: Tensor<S>,
}

impl<S: Scalar> ChannelBatch<S> {
    /// Draws `CN(0, sigma^2)` noise for each state.
    pub fn draw(states: &[ChannelState], symbols: usize, rng: &mut Rng) -> Result<Self> {
        let mut noise = Vec::with_capacity(states.len() * 2 * symbols);
        let mut gains = Vec::with_capacity(states.len());
        let mut equalizers = Vec::with_capacity(states.len());
        for st in states {
            for n in channel::sample_noise(symbols, st.sigma2(), rng) {
                noise.push(S::of(n.re));
                noise.push(S::of(n.im));
            }
            let h = st.h();
            let e = equalizer_gain(h)?;
            gains.push((S::of(h.re), S::of(h.im)));
            equalizers.push((S::of(e.re), S::of(e.im)));
        }
        Ok(Self {
            gains,
            equalizers,
            noise: Tensor::from_vec(&[states.len(), 2 * symbols], noise)?,
        })
    }

    /// `h*/|h|^2 (h y + n)` on `y[N, 2K]`.
    pub fn forward(&self, g: &mut Graph<S>, y: Var) -> Result<Var> {
        let faded = g.complex_scale(y, &self.gains)?;
        let noise = g.constant(self.noise.clone())?;
        let received = g.add(faded, noise)?;
        Ok(g.complex_scale(received, &self.equalizers)?)
    }
}

/// Layer layout of the codec; parameters live in a separate store.
#[derive(Clone, Debug)]
pub struct JsccNet {
    pub config: JsccConfig,
    down: Vec<(Conv2d, SeBlock)>,
    project: Conv2d,
    lift: (Conv2d, SeBlock),
    up: Vec<(ConvTranspose2d, SeBlock)>,
    to_rgb: Conv2d,
}

impl JsccNet {
    pub fn new<S: Scalar>(config: JsccConfig, store: &mut ParamStore<S>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.downsampling;
        let mut down = Vec::with_capacity(d);
        let mut cin = 3;
        for i in 0..d {
            let w = config.stage_width(i);
            let conv = Conv2d::new(store, &format!("jscc.enc{i}"), cin, w, 3, 2, 1, rng);
            let se = SeBlock::new(store, &format!("jscc.enc{i}.se"), w, rng);
            down.push((conv, se));
            cin = w;
        }
        let project = Conv2d::new(store, "jscc.enc_out", cin, config.c_out, 3, 1, 1, rng);
        let top = config.stage_width(d - 1);
        let lift = (
            Conv2d::new(store, "jscc.dec_in", config.c_out, top, 3, 1, 1, rng),
            SeBlock::new(store, "jscc.dec_in.se", top, rng),
        );
        let mut up = Vec::with_capacity(d);
        let mut cin = top;
        for i in (0..d).rev() {
            let w = if i == 0 { config.base_width } else { config.stage_width(i - 1) };
            let conv = ConvTranspose2d::new(store, &format!("jscc.dec{i}"), cin, w, 4, 2, 1, rng);
            let se = SeBlock::new(store, &format!("jscc.dec{i}.se"), w, rng);
            up.push((conv, se));
            cin = w;
        }
        let to_rgb = Conv2d::new(store, "jscc.dec_out", cin, 3, 3, 1, 1, rng);
        Ok(Self {
            config,
            down,
            project,
            lift,
            up,
            to_rgb,
        })
    }

    /// `[(gamma - lo)/(hi - lo), re h, im h]` per state, SNR term clamped to `[0, 1]`.
    pub fn csi_features<S: Scalar>(&self, states: &[ChannelState]) -> Tensor<S> {
        let (lo, hi) = self.config.snr_range_db;
        let span = (hi - lo).max(1e-9);
        let data: Vec<S> = states
            .iter()
            .flat_map(|s| {
                let g = ((s.gamma_db() - lo) / span).clamp(0.0, 1.0);
                [S::of(g), S::of(s.h().re), S::of(s.h().im)]
            })
            .collect();
        Tensor::from_vec(&[states.len(), SeBlock::CSI_FEATURES], data).expect("sized from states")
    }

    fn check_images(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() != 4 || shape[1] != 3 {
            return Err(CoreError::Shape(format!("expected [N, 3, H, W], got {shape:?}")));
        }
        self.config.symbols_per_image(shape[2], shape[3])
    }

    /// Images to power-normalized real symbol rows `[N, 2K]`.
    pub fn encode_graph<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var, csi: Var) -> Result<Var> {
        let k = self.check_images(g.shape(x))?;
        let n = g.shape(x)[0];
        let mut h = x;
        for (conv, se) in &self.down {
            h = conv.forward(g, p, h)?;
            h = g.relu(h)?;
            h = se.forward(g, p, h, csi)?;
        }
        let z = self.project.forward(g, p, h)?;
        let flat = g.reshape(z, &[n, 2 * k])?;
        let energy = S::of(k as f64 * self.config.power);
        Ok(g.power_normalize(flat, energy)?)
    }

    /// Real symbol rows `[N, 2K]` to (unclamped) images `[N, 3, H, W]`.
    pub fn decode_graph<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        y: Var,
        csi: Var,
        (height, width): (usize, usize),
    ) -> Result<Var> {
        let k = self.config.symbols_per_image(height, width)?;
        let ys = g.shape(y).to_vec();
        if ys.len() != 2 || ys[1] != 2 * k {
            return Err(CoreError::SymbolCount {
                expected: k,
                actual: ys.get(1).copied().unwrap_or(0) / 2,
            });
        }
        let f = 1 << self.config.downsampling;
        let z = g.reshape(y, &[ys[0], self.config.c_out, height / f, width / f])?;
        let (conv, se) = &self.lift;
        let mut h = conv.forward(g, p, z)?;
        h = g.relu(h)?;
        h = se.forward(g, p, h, csi)?;
        for (conv, se) in &self.up {
            h = conv.forward(g, p, h)?;
            h = g.relu(h)?;
            h = se.forward(g, p, h, csi)?;
        }
        Ok(self.to_rgb.forward(g, p, h)?)
    }

    /// Batch states: one `gamma` per batch, one gain draw per image.
    pub fn draw_states(&self, n: usize, gamma_db: f64, rng: &mut Rng) -> Result<Vec<ChannelState>> {
        let c = &self.config;
        (0..n)
            .map(|_| Ok(ChannelState::draw(c.channel_kind, gamma_db, c.gain_variance, c.power, rng)?))
            .collect()
    }

    pub fn loss_on<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        x: &Tensor<S>,
        states: &[ChannelState],
        channel: &ChannelBatch<S>,
    ) -> Result<Var> {
        let xv = g.constant(x.clone())?;
        let csi = g.constant(self.csi_features(states))?;
        let out = self.forward(g, p, xv, csi, channel)?;
        Ok(g.mse_loss(out, xv)?)
    }

    /// Encoder, channel and decoder in one graph; returns the unclamped reconstruction.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        x: Var,
        csi: Var,
        channel: &ChannelBatch<S>,
    ) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        let y = self.encode_graph(g, p, x, csi)?;
        let y_eq = channel.forward(g, y)?;
        self.decode_graph(g, p, y_eq, csi, (xs[2], xs[3]))
    }
}

fn check_states(n: usize, states: &[ChannelState]) -> Result<()> {
    if states.len() != n {
        return Err(CoreError::Shape(format!("{n} images but {} channel states", states.len())));
    }
    Ok(())
}

/// Trained (or freshly initialized) codec with its parameters.
#[derive(Clone, Debug)]
pub struct JsccModel {
    pub net: JsccNet,
    pub params: ParamStore<f32>,
}

impl JsccModel {
    pub fn new(config: JsccConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut r = rng::stream(seed, 0, "jscc/init");
        let net = JsccNet::new(config, &mut params, &mut r)?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &JsccConfig {
        &self.net.config
    }

    /// One power-normalized symbol vector per image.
    pub fn encode(&self, images: &Tensor<f32>, states: &[ChannelState]) -> Result<Vec<ComplexSymbolVector>> {
        check_states(images.shape().first().copied().unwrap_or(0), states)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g)?;
        let x = g.constant(images.clone())?;
        let csi = g.constant(self.net.csi_features(states))?;
        let y = self.net.encode_graph(&mut g, &p, x, csi)?;
        let power = self.config().power;
        let rows = g.value(y);
        (0..rows.shape()[0])
            .map(|i| {
                let raw = channel::pack_complex(&rows.slice_outer(i, i + 1)?, power)?;
                // Renormalize in f64 so the power constraint holds to double precision.
                Ok(channel::normalize_power(&raw, power)?)
            })
            .collect()
    }

    /// Equalized symbol vectors to images clamped to `[-1, 1]`.
    pub fn decode(
        &self,
        symbols: &[ComplexSymbolVector],
        states: &[ChannelState],
        resolution: (usize, usize),
    ) -> Result<Tensor<f32>> {
        check_states(symbols.len(), states)?;
        let k = self.config().symbols_per_image(resolution.0, resolution.1)?;
        let mut rows = Vec::with_capacity(symbols.len());
        for s in symbols {
            if s.len() != k {
                return Err(CoreError::SymbolCount {
                    expected: k,
                    actual: s.len(),
                });
            }
            rows.push(channel::unpack_complex::<f32>(s, &[1, 2 * k])?);
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g)?;
        let y = g.constant(Tensor::concat_outer(&rows)?)?;
        let csi = g.constant(self.net.csi_features(states))?;
        let x = self.net.decode_graph(&mut g, &p, y, csi, resolution)?;
        Ok(g.value(x).clamp(-1.0, 1.0))
    }

    /// Encode, pass each image through its channel, equalize and decode.
    pub fn transmit(&self, images: &Tensor<f32>, states: &[ChannelState], rngs: &mut [Rng]) -> Result<Tensor<f32>> {
        let s = images.shape();
        let tx = self.encode(images, states)?;
        let mut eq = Vec::with_capacity(tx.len());
        for ((y, st), r) in tx.iter().zip(states).zip(rngs.iter_mut()) {
            let rx = channel::apply_channel(y, st, r);
            eq.push(channel::equalize(&rx, st.h())?);
        }
        self.decode(&eq, states, (s[2], s[3]))
    }

    fn eval_loss(&self, x: &Tensor<f32>, states: &[ChannelState], channel: &ChannelBatch<f32>) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g)?;
        let l = self.net.loss_on(&mut g, &p, x, states, channel)?;
        Ok(g.value(l).data()[0] as f64)
    }
}

/// Minimizes `E||x - D(h*/|h|^2 (h E(x) + n))||^2` with `gamma` drawn
/// uniformly from the configured range for every batch.
pub fn train_jscc(model: &mut JsccModel, data: &ImageSet, cfg: &TrainConfig) -> Result<TrainReport> {
    let (h, w) = data.resolution();
    let k = model.config().symbols_per_image(h, w)?;
    let (lo, hi) = model.config().snr_range_db;

    let mut er = rng::stream(cfg.seed, 0, "jscc/eval");
    let eval = data.head(cfg.batch_size.max(16))?;
    let eval_states: Vec<ChannelState> = (0..eval.len())
        .map(|_| {
            let gamma = if hi > lo { er.gen_range(lo..=hi) } else { lo };
            model.net.draw_states(1, gamma, &mut er).map(|mut v| v.remove(0))
        })
        .collect::<Result<_>>()?;
    let eval_channel = ChannelBatch::draw(&eval_states, k, &mut er)?;
    let initial_eval = model.eval_loss(&eval.images, &eval_states, &eval_channel)?;

    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, train::batch_rng(cfg.seed, "jscc"))?;
    let net = model.net.clone();
    let losses = train::fit(&mut model.params, cfg, "jscc", |g, p, iter| {
        let idx = sampler.next_batch();
        let (x, _) = data.batch(&idx)?;
        let mut r = rng::stream(cfg.seed, iter as u64, "jscc/channel");
        let gamma = if hi > lo { r.gen_range(lo..=hi) } else { lo };
        let states = net.draw_states(idx.len(), gamma, &mut r)?;
        let channel = ChannelBatch::draw(&states, k, &mut r)?;
        net.loss_on(g, p, &x, &states, &channel)
    })?;
    let final_eval = model.eval_loss(&eval.images, &eval_states, &eval_channel)?;
    Ok(TrainReport {
        losses,
        initial_eval,
        final_eval,
    })
}
