//! Deterministic image <-> latent autoencoder with 8x spatial downsampling,
//! standing in for a pretrained latent-diffusion VAE.

use djscc_autodiff::nn::{Conv2d, ConvTranspose2d};
use djscc_autodiff::{Bound, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

use crate::data::ImageSet;
use crate::error::{CoreError, Result};
use crate::rng::{self, Rng};
use crate::train::{self, BatchSampler, TrainConfig, TrainReport};

pub const STAGES: usize = 3;
pub const FACTOR: usize = 1 << STAGES;

#[derive(Clone, Debug, PartialEq)]
pub struct LatentConfig {
    pub channels: usize,
    pub base_width: usize,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            base_width: 32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LatentNet {
    pub config: LatentConfig,
    stem: Conv2d,
    down: Vec<Conv2d>,
    to_latent: Conv2d,
    from_latent: Conv2d,
    up: Vec<ConvTranspose2d>,
    to_rgb: Conv2d,
    /// Non-trainable multiplier giving latents roughly unit variance.
    pub scale: ParamId,
}

impl LatentNet {
    pub fn new<S: Scalar>(config: LatentConfig, store: &mut ParamStore<S>, rng: &mut Rng) -> Result<Self> {
        if config.channels == 0 || config.base_width == 0 {
            return Err(CoreError::Config("latent channels and width must be positive".into()));
        }
        let w = |i: usize| config.base_width << i.min(1);
        let stem = Conv2d::new(store, "latent.enc_in", 3, w(0), 3, 1, 1, rng);
        let down = (0..STAGES)
            .map(|i| Conv2d::new(store, &format!("latent.enc{i}"), w(i), w(i + 1), 3, 2, 1, rng))
            .collect();
        let to_latent = Conv2d::new(store, "latent.enc_out", w(STAGES), config.channels, 3, 1, 1, rng);
        let from_latent = Conv2d::new(store, "latent.dec_in", config.channels, w(STAGES), 3, 1, 1, rng);
        let up = (0..STAGES)
            .rev()
            .map(|i| ConvTranspose2d::new(store, &format!("latent.dec{i}"), w(i + 1), w(i), 4, 2, 1, rng))
            .collect();
        let to_rgb = Conv2d::new(store, "latent.dec_out", w(0), 3, 3, 1, 1, rng);
        let scale = store.add("latent.scale", Tensor::ones(&[1]));
        store.set_trainable(|n| n == "latent.scale", false);
        Ok(Self {
            config,
            stem,
            down,
            to_latent,
            from_latent,
            up,
            to_rgb,
            scale,
        })
    }

    pub fn latent_shape(&self, n: usize, h: usize, w: usize) -> Result<[usize; 4]> {
        if h % FACTOR != 0 || w % FACTOR != 0 || h == 0 || w == 0 {
            return Err(CoreError::Shape(format!("{h}x{w} is not divisible by {FACTOR}")));
        }
        Ok([n, self.config.channels, h / FACTOR, w / FACTOR])
    }

    /// Unscaled encoder.
    pub fn encode_graph<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(CoreError::Shape(format!("expected [N, 3, H, W], got {s:?}")));
        }
        self.latent_shape(s[0], s[2], s[3])?;
        let mut h = self.stem.forward(g, p, x)?;
        h = g.relu(h)?;
        for conv in &self.down {
            h = conv.forward(g, p, h)?;
            h = g.relu(h)?;
        }
        Ok(self.to_latent.forward(g, p, h)?)
    }

    /// Unscaled decoder, unclamped.
    pub fn decode_graph<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, z: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        if s.len() != 4 || s[1] != self.config.channels {
            return Err(CoreError::Shape(format!(
                "expected [N, {}, h, w] latents, got {s:?}",
                self.config.channels
            )));
        }
        let mut h = self.from_latent.forward(g, p, z)?;
        h = g.relu(h)?;
        for conv in &self.up {
            h = conv.forward(g, p, h)?;
            h = g.relu(h)?;
        }
        Ok(self.to_rgb.forward(g, p, h)?)
    }
}

#[derive(Clone, Debug)]
pub struct LatentCodec {
    pub net: LatentNet,
    pub params: ParamStore<f32>,
}

impl LatentCodec {
    pub fn new(config: LatentConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut r = rng::stream(seed, 0, "latent/init");
        let net = LatentNet::new(config, &mut params, &mut r)?;
        Ok(Self { net, params })
    }

    pub fn scale(&self) -> f32 {
        self.params.get(self.net.scale).data()[0]
    }

    /// `E(x) * scale`: the diffusion target for clean images and the spatial
    /// condition for received ones.
    pub fn encode_latent(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g)?;
        let xv = g.constant(x.clone())?;
        let z = self.net.encode_graph(&mut g, &p, xv)?;
        let s = self.scale();
        Ok(g.value(z).map(|v| v * s))
    }

    /// `D(z / scale)` clamped to `[-1, 1]`.
    pub fn decode_latent(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g)?;
        let s = self.scale();
        let zv = g.constant(z.map(|v| v / s))?;
        let x = self.net.decode_graph(&mut g, &p, zv)?;
        Ok(g.value(x).clamp(-1.0, 1.0))
    }

    /// Latents of a whole set, computed in chunks.
    pub fn encode_set(&self, images: &Tensor<f32>, chunk: usize) -> Result<Tensor<f32>> {
        let n = images.shape()[0];
        let mut parts = Vec::new();
        let mut i = 0;
        while i < n {
            let j = (i + chunk.max(1)).min(n);
            parts.push(self.encode_latent(&images.slice_outer(i, j)?)?);
            i = j;
        }
        Ok(Tensor::concat_outer(&parts)?)
    }

    fn loss_on<S: Scalar>(net: &LatentNet, g: &mut Graph<S>, p: &Bound, x: &Tensor<S>) -> Result<Var> {
        let xv = g.constant(x.clone())?;
        let z = net.encode_graph(g, p, xv)?;
        let out = net.decode_graph(g, p, z)?;
        Ok(g.mse_loss(out, xv)?)
    }

    fn eval_loss(&self, x: &Tensor<f32>) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g)?;
        let l = Self::loss_on(&self.net, &mut g, &p, x)?;
        Ok(g.value(l).data()[0] as f64)
    }
}

/// Reconstruction-MSE training, then sets the latent scale to
/// `1 / std(E(x))` over (up to 512 of) the training images.
pub fn train_latent_codec(codec: &mut LatentCodec, data: &ImageSet, cfg: &TrainConfig) -> Result<TrainReport> {
    let (h, w) = data.resolution();
    codec.net.latent_shape(1, h, w)?;
    let eval = data.head(cfg.batch_size.max(16))?;
    let initial_eval = codec.eval_loss(&eval.images)?;
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, train::batch_rng(cfg.seed, "latent"))?;
    let net = codec.net.clone();
    let losses = train::fit(&mut codec.params, cfg, "latent", |g, p, _| {
        let (x, _) = data.batch(&sampler.next_batch())?;
        LatentCodec::loss_on(&net, g, p, &x)
    })?;
    let final_eval = codec.eval_loss(&eval.images)?;

    codec.params.get_mut(codec.net.scale).data_mut()[0] = 1.0;
    let z = codec.encode_set(&data.head(512)?.images, 64)?;
    let n = z.numel() as f64;
    let mean = z.sum() / n;
    let var = z.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    if var > 0.0 && var.is_finite() {
        codec.params.get_mut(codec.net.scale).data_mut()[0] = (1.0 / var.sqrt()) as f32;
    }
    Ok(TrainReport {
        losses,
        initial_eval,
        final_eval,
    })
}
