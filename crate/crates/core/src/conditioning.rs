//! Condition set for the denoiser: spatial latent of the received image,
//! semantic label embedding and channel state.

use djscc_autodiff::nn::Linear;
use djscc_autodiff::{Bound, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use num_complex::Complex64;

use crate::channel::ChannelState;
use crate::error::{CoreError, Result};
use crate::latent::LatentCodec;
use crate::rng::Rng;

/// Sinusoid frequency pairs of the SNR encoding.
pub const SINUSOID_PAIRS: usize = 32;
/// Length of the pre-MLP CSI feature vector.
pub const CSI_FEATURES: usize = 2 * SINUSOID_PAIRS + 2;

/// `f_v = E_ldm(x_hat)`: the same encoder (and parameters) that produces `z_0`.
pub fn extract_spatial_condition(x_hat: &Tensor<f32>, codec: &LatentCodec) -> Result<Tensor<f32>> {
    codec.encode_latent(x_hat)
}

/// Learned label embeddings `[L, E]`; the last row is the null label.
#[derive(Clone, Copy, Debug)]
pub struct SemanticTable {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl SemanticTable {
    /// `classes` real labels plus one null row; real rows start as `N(0, 1)`,
    /// the null row as zeros.
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, classes: usize, dim: usize, rng: &mut Rng) -> Self {
        let rows = classes + 1;
        let mut t = Tensor::<S>::randn(&[rows, dim], rng);
        t.data_mut()[classes * dim..].iter_mut().for_each(|v| *v = S::zero());
        let table = store.add(format!("{name}.table"), t);
        Self { table, rows, dim }
    }

    pub fn null_label(&self) -> usize {
        self.rows - 1
    }

    /// `f_t` as `[N, 1, E]` for one label per item.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, labels: &[usize]) -> Result<Var> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.rows) {
            return Err(CoreError::Config(format!("label {bad} outside table of {} rows", self.rows)));
        }
        let rows = g.embedding(p[self.table], labels)?;
        Ok(g.reshape(rows, &[labels.len(), 1, self.dim])?)
    }
}

/// Row lookup in a plain embedding table.
pub fn semantic_embedding<S: Scalar>(table: &Tensor<S>, label: usize) -> Result<Tensor<S>> {
    let rows = table.shape().first().copied().unwrap_or(0);
    if label >= rows {
        return Err(CoreError::Config(format!("label {label} outside table of {rows} rows")));
    }
    Ok(table.select_outer(&[label])?)
}

/// `[sin(g w_i), cos(g w_i) for i < F] ++ [re h, im h]` with
/// `w_i = 10000^(-i/F)`; `g` is clamped into `range` with a warning.
pub fn csi_encoding(gamma_db: f64, h: Complex64, range: (f64, f64)) -> Vec<f64> {
    let (lo, hi) = range;
    let g = if gamma_db.is_nan() {
        log::warn!("SNR is NaN; using {lo} dB for the CSI encoding");
        lo
    } else if gamma_db < lo || gamma_db > hi {
        let c = gamma_db.clamp(lo, hi);
        log::warn!("SNR {gamma_db} dB outside [{lo}, {hi}]; clamped to {c} dB for the CSI encoding");
        c
    } else {
        gamma_db
    };
    let mut out = Vec::with_capacity(CSI_FEATURES);
    for i in 0..SINUSOID_PAIRS {
        let w = 10000f64.powf(-(i as f64) / SINUSOID_PAIRS as f64);
        out.push((g * w).sin());
    }
    for i in 0..SINUSOID_PAIRS {
        let w = 10000f64.powf(-(i as f64) / SINUSOID_PAIRS as f64);
        out.push((g * w).cos());
    }
    out.push(h.re);
    out.push(h.im);
    out
}

/// Batched [`csi_encoding`] as `[N, CSI_FEATURES]`.
pub fn csi_features<S: Scalar>(states: &[ChannelState], range: (f64, f64)) -> Tensor<S> {
    let data: Vec<S> = states
        .iter()
        .flat_map(|s| csi_encoding(s.gamma_db(), s.h(), range))
        .map(S::of)
        .collect();
    Tensor::from_vec(&[states.len(), CSI_FEATURES], data).expect("sized from states")
}

/// Two-layer MLP from the CSI encoding to the time-embedding width.
#[derive(Clone, Copy, Debug)]
pub struct CsiEmbedder {
    pub hidden: Linear,
    pub out: Linear,
}

impl CsiEmbedder {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize, rng: &mut Rng) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), CSI_FEATURES, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, features: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, features)?;
        let h = g.silu(h)?;
        Ok(self.out.forward(g, p, h)?)
    }
}

/// Switches for the condition ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConditionOptions {
    pub use_text: bool,
    pub use_csi: bool,
}

impl Default for ConditionOptions {
    fn default() -> Self {
        Self {
            use_text: true,
            use_csi: true,
        }
    }
}

/// Batched conditions `{f_v, f_t, h, gamma}`. The semantic part is held as
/// label ids into the denoiser's embedding table.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSet {
    f_v: Tensor<f32>,
    labels: Vec<usize>,
    states: Vec<ChannelState>,
}

impl ConditionSet {
    pub fn f_v(&self) -> &Tensor<f32> {
        &self.f_v
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn states(&self) -> &[ChannelState] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-item latent dims `[C_l, H_l, W_l]`.
    pub fn latent_dims(&self) -> [usize; 3] {
        let s = self.f_v.shape();
        [s[1], s[2], s[3]]
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            f_v: self.f_v.select_outer(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            states: indices.iter().map(|&i| self.states[i]).collect(),
        })
    }

    /// Copy with `f_v` replaced (same shape required).
    pub fn with_f_v(&self, f_v: Tensor<f32>) -> Result<Self> {
        if f_v.shape() != self.f_v.shape() {
            return Err(CoreError::Shape(format!(
                "f_v shape {:?} does not match {:?}",
                f_v.shape(),
                self.f_v.shape()
            )));
        }
        Ok(Self { f_v, ..self.clone() })
    }
}

/// Builds a condition set. `labels = None` (text disabled) maps every item
/// to `null_label`. `latent_dims` is the diffusion latent `[C_l, H_l, W_l]`.
pub fn assemble_conditions(
    f_v: Tensor<f32>,
    labels: Option<&[usize]>,
    null_label: usize,
    states: Vec<ChannelState>,
    latent_dims: [usize; 3],
) -> Result<ConditionSet> {
    let s = f_v.shape();
    if s.len() != 4 || s[1..] != latent_dims {
        return Err(CoreError::Shape(format!(
            "f_v shape {s:?} does not match latent dims {latent_dims:?}"
        )));
    }
    let n = s[0];
    let labels = match labels {
        Some(l) => {
            if let Some(&bad) = l.iter().find(|&&v| v > null_label) {
                return Err(CoreError::Config(format!("label {bad} exceeds null label {null_label}")));
            }
            l.to_vec()
        }
        None => vec![null_label; n],
    };
    if labels.len() != n || states.len() != n {
        return Err(CoreError::Shape(format!(
            "{n} spatial conditions, {} labels, {} channel states",
            labels.len(),
            states.len()
        )));
    }
    Ok(ConditionSet { f_v, labels, states })
}
