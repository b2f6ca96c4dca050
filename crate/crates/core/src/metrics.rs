//! Image-quality and channel-statistics measurement.

use djscc_autodiff::{Scalar, Tensor};
use thiserror::Error;

use crate::channel::ComplexSymbolVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("image of shape {shape:?} is too small for {scales} scale(s) with window {window}")]
    ImageTooSmall {
        shape: Vec<usize>,
        scales: usize,
        window: usize,
    },
    #[error("expected image shape [C, H, W] or [N, C, H, W], got {0:?}")]
    BadRank(Vec<usize>),
    #[error("symbol count mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

/// Dynamic range of images in `[-1, 1]`.
pub const DEFAULT_PEAK: f64 = 2.0;

/// Scale weights of the standard five-scale MS-SSIM, first three, renormalized.
const MS_WEIGHTS: [f64; 3] = [0.0448, 0.2856, 0.3001];

fn check_same(x: &[usize], y: &[usize]) -> Result<()> {
    if x != y {
        return Err(MetricError::ShapeMismatch(x.to_vec(), y.to_vec()));
    }
    Ok(())
}

pub fn mse<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>) -> Result<f64> {
    check_same(x.shape(), y.shape())?;
    let n = x.numel().max(1) as f64;
    Ok(x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| {
            let d = a.f64() - b.f64();
            d * d
        })
        .sum::<f64>()
        / n)
}

/// `10 log10(peak^2 / MSE)`; identical inputs give `+inf`.
pub fn psnr<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    /// Odd Gaussian window side.
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl SsimParams {
    pub fn for_peak(peak: f64) -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            c1: (0.01 * peak).powi(2),
            c2: (0.03 * peak).powi(2),
        }
    }
}

impl Default for SsimParams {
    fn default() -> Self {
        Self::for_peak(DEFAULT_PEAK)
    }
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of one `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let ow = w + 1 - n;
    let oh = h + 1 - n;
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..n).map(|i| k[i] * plane[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| k[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    (out, oh, ow)
}

/// Means of the luminance term, the contrast-structure term and their
/// product over one plane.
fn ssim_terms(x: &[f64], y: &[f64], h: usize, w: usize, p: &SsimParams) -> (f64, f64, f64) {
    let k = gaussian_kernel(p.window, p.sigma);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, _, _) = filter_valid(x, h, w, &k);
    let (my, _, _) = filter_valid(y, h, w, &k);
    let (sxx, _, _) = filter_valid(&xx, h, w, &k);
    let (syy, _, _) = filter_valid(&yy, h, w, &k);
    let (sxy, _, _) = filter_valid(&xy, h, w, &k);
    let n = mx.len() as f64;
    let (mut lum, mut cs, mut both) = (0.0, 0.0, 0.0);
    for i in 0..mx.len() {
        let vx = sxx[i] - mx[i] * mx[i];
        let vy = syy[i] - my[i] * my[i];
        let cxy = sxy[i] - mx[i] * my[i];
        let l = (2.0 * mx[i] * my[i] + p.c1) / (mx[i] * mx[i] + my[i] * my[i] + p.c1);
        let c = (2.0 * cxy + p.c2) / (vx + vy + p.c2);
        lum += l;
        cs += c;
        both += l * c;
    }
    (lum / n, cs / n, both / n)
}

/// Splits `[C,H,W]` or `[N,C,H,W]` into `(planes, h, w)`.
fn planes<S: Scalar>(x: &Tensor<S>) -> Result<(Vec<Vec<f64>>, usize, usize)> {
    let s = x.shape();
    if s.len() != 3 && s.len() != 4 {
        return Err(MetricError::BadRank(s.to_vec()));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let data = x.to_f64_vec();
    Ok((data.chunks(h * w).map(<[f64]>::to_vec).collect(), h, w))
}

/// Mean SSIM over all channels (and batch entries).
pub fn ssim<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>, params: &SsimParams) -> Result<f64> {
    check_same(x.shape(), y.shape())?;
    let (px, h, w) = planes(x)?;
    let (py, _, _) = planes(y)?;
    if h < params.window || w < params.window {
        return Err(MetricError::ImageTooSmall {
            shape: x.shape().to_vec(),
            scales: 1,
            window: params.window,
        });
    }
    let total: f64 = px
        .iter()
        .zip(&py)
        .map(|(a, b)| {
            ssim_terms(a, b, h, w, params).2
        })
        .sum();
    Ok(total / px.len() as f64)
}

fn downsample(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let i = 2 * r * w + 2 * c;
            out[r * ow + c] = 0.25 * (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]);
        }
    }
    out
}

/// Largest odd window not above `min(limit, side)`.
fn fit_window(limit: usize, side: usize) -> usize {
    let m = limit.min(side);
    if m % 2 == 0 {
        m.saturating_sub(1)
    } else {
        m
    }
}

/// Three-scale MS-SSIM. The window shrinks to the largest odd size that fits
/// at coarse scales; negative contrast-structure terms are clamped to zero.
pub fn ms_ssim<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>, params: &SsimParams) -> Result<f64> {
    check_same(x.shape(), y.shape())?;
    let scales = MS_WEIGHTS.len();
    let (px, h0, w0) = planes(x)?;
    let (py, _, _) = planes(y)?;
    let (hc, wc) = (h0 >> (scales - 1), w0 >> (scales - 1));
    if fit_window(params.window, hc.min(wc)) < 3 {
        return Err(MetricError::ImageTooSmall {
            shape: x.shape().to_vec(),
            scales,
            window: params.window,
        });
    }
    let wsum: f64 = MS_WEIGHTS.iter().sum();
    let mut total = 0.0;
    for (a0, b0) in px.iter().zip(&py) {
        let (mut a, mut b) = (a0.clone(), b0.clone());
        let (mut h, mut w) = (h0, w0);
        let mut value = 1.0;
        for (s, wt) in MS_WEIGHTS.iter().enumerate() {
            let p = SsimParams {
                window: fit_window(params.window, h.min(w)),
                ..*params
            };
            let (l, cs, _) = ssim_terms(&a, &b, h, w, &p);
            let e = wt / wsum;
            value *= cs.max(0.0).powf(e);
            if s + 1 == scales {
                value *= l.max(0.0).powf(e);
            } else {
                a = downsample(&a, h, w);
                b = downsample(&b, h, w);
                h /= 2;
                w /= 2;
            }
        }
        total += value;
    }
    Ok(total / px.len() as f64)
}

/// `10 log10(sum |h tx|^2 / sum |rx - h tx|^2)`; zero noise gives `+inf`.
pub fn empirical_snr(
    tx: &ComplexSymbolVector,
    rx: &ComplexSymbolVector,
    h: num_complex::Complex64,
) -> Result<f64> {
    let (s, n) = snr_energies(tx, rx, h)?;
    Ok(snr_db_from_energies(s, n))
}

/// `(signal, noise)` energies for pooling across fading blocks.
pub fn snr_energies(
    tx: &ComplexSymbolVector,
    rx: &ComplexSymbolVector,
    h: num_complex::Complex64,
) -> Result<(f64, f64)> {
    if tx.len() != rx.len() {
        return Err(MetricError::LengthMismatch(tx.len(), rx.len()));
    }
    let mut signal = 0.0;
    let mut noise = 0.0;
    for (t, r) in tx.symbols().iter().zip(rx.symbols()) {
        let ht = h * t;
        signal += ht.norm_sqr();
        noise += (r - ht).norm_sqr();
    }
    Ok((signal, noise))
}

pub fn snr_db_from_energies(signal: f64, noise: f64) -> f64 {
    if noise == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (signal / noise).log10()
    }
}

/// Distortion numbers for one reconstruction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageMetrics {
    pub psnr_db: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub mse: f64,
}

impl ImageMetrics {
    /// Metrics of one `[C, H, W]` image pair at peak 2.
    pub fn measure<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>) -> Result<Self> {
        let params = SsimParams::default();
        let mse = mse(x, y)?;
        let (_, h, w) = planes(x)?;
        let ssim_params = SsimParams {
            window: fit_window(params.window, h.min(w)),
            ..params
        };
        Ok(Self {
            psnr_db: psnr_from_mse(mse, DEFAULT_PEAK),
            ssim: ssim(x, y, &ssim_params)?,
            ms_ssim: ms_ssim(x, y, &params)?,
            mse,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub metrics: ImageMetrics,
}

/// Per-image metrics of one (γ, ρ, λ, seed) configuration and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub gamma_db: f64,
    pub rho: f64,
    pub lambda: f64,
    pub seed: u64,
    pub images: Vec<ImageRecord>,
}

impl MetricReport {
    pub fn new(gamma_db: f64, rho: f64, lambda: f64, seed: u64) -> Self {
        Self {
            gamma_db,
            rho,
            lambda,
            seed,
            images: Vec::new(),
        }
    }

    pub fn push(&mut self, image_id: impl Into<String>, metrics: ImageMetrics) {
        self.images.push(ImageRecord {
            image_id: image_id.into(),
            metrics,
        });
    }

    /// Arithmetic mean of each per-image field, `None` when empty.
    pub fn aggregate(&self) -> Option<ImageMetrics> {
        if self.images.is_empty() {
            return None;
        }
        let n = self.images.len() as f64;
        let mean = |f: fn(&ImageMetrics) -> f64| self.images.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
        Some(ImageMetrics {
            psnr_db: mean(|m| m.psnr_db),
            ssim: mean(|m| m.ssim),
            ms_ssim: mean(|m| m.ms_ssim),
            mse: mean(|m| m.mse),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{self, ChannelState};
    use crate::rng;
    use num_complex::Complex64;
    use rand::Rng as _;

    fn image(seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, 0, "img");
        let data: Vec<f64> = (0..3 * 32 * 32).map(|_| r.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[3, 32, 32], data).unwrap()
    }

    fn noisy(x: &Tensor<f64>, sd: f64, seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, 0, "noise");
        let n = Tensor::<f64>::randn(x.shape(), &mut r);
        x.zip_map(&n, |a, b| a + sd * b).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let x = image(1);
        assert_eq!(psnr(&x, &x, 2.0).unwrap(), f64::INFINITY);
        let z = Tensor::<f64>::zeros(&[3, 8, 8]);
        let h = Tensor::<f64>::full(&[3, 8, 8], 0.5);
        assert!((psnr(&z, &h, 2.0).unwrap() - 10.0 * 16f64.log10()).abs() < 1e-12);
        let p: Vec<f64> = [0.01, 0.1, 0.5]
            .iter()
            .map(|&sd| psnr(&x, &noisy(&x, sd, 9), 2.0).unwrap())
            .collect();
        assert!(p[0] > p[1] && p[1] > p[2]);
        assert!(psnr(&x, &z, 2.0).is_err());
    }

    #[test]
    fn ssim_examples() {
        let x = image(2);
        let p = SsimParams::default();
        assert!((ssim(&x, &x, &p).unwrap() - 1.0).abs() < 1e-9);
        assert!((ms_ssim(&x, &x, &p).unwrap() - 1.0).abs() < 1e-9);

        // Checkerboard: zero local mean, so only the structure term matters.
        let data: Vec<f64> = (0..3 * 32 * 32)
            .map(|i| if (i / 32 + i % 32) % 2 == 0 { 0.5 } else { -0.5 })
            .collect();
        let board = Tensor::from_vec(&[3, 32, 32], data).unwrap();
        assert!(ssim(&board, &board.map(|v| -v), &p).unwrap() <= 0.0);

        let c = Tensor::<f64>::full(&[1, 16, 16], 0.2);
        let mut prev = 1.0 + 1e-12;
        for d in [0.0, 0.01, 0.05, 0.1, 0.3, 0.6] {
            let s = ssim(&c, &c.map(|v| v + d), &p).unwrap();
            assert!(s <= prev, "ssim not monotone at delta {d}");
            prev = s;
        }
    }

    #[test]
    fn ssim_is_symmetric() {
        let x = image(3);
        let y = noisy(&x, 0.2, 4);
        let p = SsimParams::default();
        assert_eq!(ssim(&x, &y, &p).unwrap(), ssim(&y, &x, &p).unwrap());
        assert_eq!(psnr(&x, &y, 2.0).unwrap(), psnr(&y, &x, 2.0).unwrap());
        let a = ms_ssim(&x, &y, &p).unwrap();
        assert!((a - ms_ssim(&y, &x, &p).unwrap()).abs() < 1e-15);
        assert!(a < 1.0 && a > 0.0);
    }

    #[test]
    fn small_images_are_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 8, 8]);
        assert!(matches!(
            ssim(&x, &x, &SsimParams::default()),
            Err(MetricError::ImageTooSmall { .. })
        ));
        assert!(ms_ssim(&x, &x, &SsimParams::default()).is_err());
    }

    #[test]
    fn empirical_snr_matches_nominal() {
        let k = 1_000_000;
        let mut r = rng::stream(5, 0, "tx");
        let raw: Vec<Complex64> = channel::sample_noise(k, 1.0, &mut r);
        let tx = channel::normalize_power(&ComplexSymbolVector::new(raw, 1.0).unwrap(), 1.0).unwrap();

        let clean = ChannelState::awgn(f64::INFINITY, 1.0).unwrap();
        let rx = channel::apply_channel(&tx, &clean, &mut r);
        assert_eq!(empirical_snr(&tx, &rx, clean.h()).unwrap(), f64::INFINITY);

        let awgn = ChannelState::awgn(5.0, 1.0).unwrap();
        let rx = channel::apply_channel(&tx, &awgn, &mut r);
        assert!((empirical_snr(&tx, &rx, awgn.h()).unwrap() - 5.0).abs() < 0.1);

        let two = ChannelState::rayleigh(Complex64::new(2.0, 0.0), 5.0, 4.0, 1.0).unwrap();
        let rx = channel::apply_channel(&tx, &two, &mut r);
        assert!((empirical_snr(&tx, &rx, two.h()).unwrap() - 5.0).abs() < 0.1);
    }

    #[test]
    fn report_aggregates_by_mean() {
        let mut rep = MetricReport::new(10.0, 1.0 / 6.0, 0.0, 1);
        let m = |v: f64| ImageMetrics {
            psnr_db: v,
            ssim: v / 10.0,
            ms_ssim: v / 20.0,
            mse: v / 100.0,
        };
        rep.push("a", m(10.0));
        rep.push("b", m(20.0));
        let agg = rep.aggregate().unwrap();
        let want = m(15.0);
        for (a, b) in [(agg.psnr_db, want.psnr_db), (agg.ssim, want.ssim), (agg.ms_ssim, want.ms_ssim), (agg.mse, want.mse)] {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(MetricReport::new(0.0, 0.0, 0.0, 0).aggregate().is_none());
    }
}
