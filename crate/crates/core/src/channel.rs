//! Complex-baseband channel: power normalization, AWGN and block Rayleigh
//! fading transfer, zero-forcing equalization.

use djscc_autodiff::{Scalar, Tensor};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("cannot normalize an all-zero symbol vector")]
    ZeroEnergyInput,
    #[error("channel gain is zero; equalization is undefined")]
    SingularGain,
    #[error("feature axis has odd length {0}; symbols need (re, im) pairs")]
    OddFeatureAxis(usize),
    #[error("symbol vector must hold at least one symbol")]
    EmptySymbols,
    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error("symbol count mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

pub type Result<T, E = ChannelError> = std::result::Result<T, E>;

/// `K` complex channel symbols plus the average power they were scaled to.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSymbolVector {
    symbols: Vec<Complex64>,
    declared_power: f64,
}

impl ComplexSymbolVector {
    pub fn new(symbols: Vec<Complex64>, declared_power: f64) -> Result<Self> {
        if symbols.is_empty() {
            return Err(ChannelError::EmptySymbols);
        }
        Ok(Self {
            symbols,
            declared_power,
        })
    }

    pub fn symbols(&self) -> &[Complex64] {
        &self.symbols
    }

    pub fn into_symbols(self) -> Vec<Complex64> {
        self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn declared_power(&self) -> f64 {
        self.declared_power
    }

    pub fn energy(&self) -> f64 {
        self.symbols.iter().map(|s| s.norm_sqr()).sum()
    }

    /// Measured `sum |y_k|^2 / K`.
    pub fn average_power(&self) -> f64 {
        self.energy() / self.len() as f64
    }

    fn with_symbols(&self, symbols: Vec<Complex64>) -> Self {
        Self {
            symbols,
            declared_power: self.declared_power,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

/// Gain, SNR and noise power of one block-fading transmission.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelState {
    kind: ChannelKind,
    h: Complex64,
    gamma_db: f64,
    gain_variance: f64,
    sigma2: f64,
}

impl ChannelState {
    /// Unit-gain channel at `gamma_db`. `gamma_db = +inf` gives a noiseless channel.
    pub fn awgn(gamma_db: f64, power: f64) -> Result<Self> {
        Ok(Self {
            kind: ChannelKind::Awgn,
            h: Complex64::new(1.0, 0.0),
            gamma_db,
            gain_variance: 1.0,
            sigma2: snr_to_noise_power(gamma_db, power, 1.0)?,
        })
    }

    /// Rayleigh channel with a known realization `h` of `CN(0, gain_variance)`.
    pub fn rayleigh(h: Complex64, gamma_db: f64, gain_variance: f64, power: f64) -> Result<Self> {
        Ok(Self {
            kind: ChannelKind::Rayleigh,
            h,
            gamma_db,
            gain_variance,
            sigma2: snr_to_noise_power(gamma_db, power, gain_variance)?,
        })
    }

    /// Draws `h` when the kind is Rayleigh.
    pub fn draw<R: Rng + ?Sized>(
        kind: ChannelKind,
        gamma_db: f64,
        gain_variance: f64,
        power: f64,
        rng: &mut R,
    ) -> Result<Self> {
        match kind {
            ChannelKind::Awgn => Self::awgn(gamma_db, power),
            ChannelKind::Rayleigh => {
                let h = sample_rayleigh_gain(gain_variance, rng);
                Self::rayleigh(h, gamma_db, gain_variance, power)
            }
        }
    }

    pub fn kind(&self) -> ChannelKind {
        self.kind
    }

    pub fn h(&self) -> Complex64 {
        self.h
    }

    pub fn gamma_db(&self) -> f64 {
        self.gamma_db
    }

    pub fn gain_variance(&self) -> f64 {
        self.gain_variance
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// `E|h|^2`: 1 for AWGN, the gain variance for Rayleigh.
    pub fn mean_gain_power(&self) -> f64 {
        match self.kind {
            ChannelKind::Awgn => 1.0,
            ChannelKind::Rayleigh => self.gain_variance,
        }
    }
}

/// `y = sqrt(K P) * y_raw / ||y_raw||`.
pub fn normalize_power(raw: &ComplexSymbolVector, power: f64) -> Result<ComplexSymbolVector> {
    if power <= 0.0 || power.is_nan() {
        return Err(ChannelError::NonPositive {
            what: "average power",
            value: power,
        });
    }
    // Pre-scale by the largest component so tiny inputs do not underflow.
    let peak = raw
        .symbols
        .iter()
        .fold(0.0f64, |m, s| m.max(s.re.abs()).max(s.im.abs()));
    if peak == 0.0 {
        return Err(ChannelError::ZeroEnergyInput);
    }
    let energy: f64 = raw.symbols.iter().map(|s| (s / peak).norm_sqr()).sum();
    let factor = (raw.len() as f64 * power).sqrt() / energy.sqrt();
    let symbols = raw.symbols.iter().map(|s| (s / peak) * factor).collect();
    Ok(ComplexSymbolVector {
        symbols,
        declared_power: power,
    })
}

/// `sigma^2 = P E|h|^2 / 10^(gamma_db / 10)`.
pub fn snr_to_noise_power(gamma_db: f64, power: f64, mean_gain_power: f64) -> Result<f64> {
    if power <= 0.0 || power.is_nan() {
        return Err(ChannelError::NonPositive {
            what: "average power",
            value: power,
        });
    }
    if mean_gain_power <= 0.0 || mean_gain_power.is_nan() {
        return Err(ChannelError::NonPositive {
            what: "mean gain power",
            value: mean_gain_power,
        });
    }
    Ok(power * mean_gain_power / 10f64.powf(gamma_db / 10.0))
}

/// `h ~ CN(0, H)`: real and imaginary parts i.i.d. `N(0, H/2)`.
pub fn sample_rayleigh_gain<R: Rng + ?Sized>(gain_variance: f64, rng: &mut R) -> Complex64 {
    let sd = (gain_variance.max(0.0) / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(sd * re, sd * im)
}

/// `K` i.i.d. `CN(0, sigma2)` samples.
pub fn sample_noise<R: Rng + ?Sized>(k: usize, sigma2: f64, rng: &mut R) -> Vec<Complex64> {
    let sd = (sigma2 / 2.0).sqrt();
    (0..k)
        .map(|_| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            Complex64::new(sd * re, sd * im)
        })
        .collect()
}

/// `y_hat = h y + n` with a caller-supplied noise realization.
pub fn apply_channel_with_noise(
    y: &ComplexSymbolVector,
    h: Complex64,
    noise: &[Complex64],
) -> Result<ComplexSymbolVector> {
    if noise.len() != y.len() {
        return Err(ChannelError::LengthMismatch(y.len(), noise.len()));
    }
    Ok(y.with_symbols(
        y.symbols
            .iter()
            .zip(noise)
            .map(|(s, n)| h * s + n)
            .collect(),
    ))
}

/// `y_hat = h y + n`, `n ~ CN(0, sigma^2 I)`, one `h` for the whole vector.
pub fn apply_channel<R: Rng + ?Sized>(
    y: &ComplexSymbolVector,
    state: &ChannelState,
    rng: &mut R,
) -> ComplexSymbolVector {
    let noise = sample_noise(y.len(), state.sigma2, rng);
    apply_channel_with_noise(y, state.h, &noise).expect("noise length matches")
}

/// Zero-forcing equalization `(h* / |h|^2) y_hat`.
pub fn equalize(received: &ComplexSymbolVector, h: Complex64) -> Result<ComplexSymbolVector> {
    let g = equalizer_gain(h)?;
    Ok(received.with_symbols(received.symbols.iter().map(|s| g * s).collect()))
}

/// `h* / |h|^2`.
pub fn equalizer_gain(h: Complex64) -> Result<Complex64> {
    let p = h.norm_sqr();
    if p == 0.0 || !p.is_finite() {
        return Err(ChannelError::SingularGain);
    }
    Ok(h.conj() / p)
}

/// Pairs consecutive entries of the flattened tensor as `(re, im)`; the last
/// axis must be even.
pub fn pack_complex<S: Scalar>(real: &Tensor<S>, declared_power: f64) -> Result<ComplexSymbolVector> {
    let last = real.shape().last().copied().unwrap_or(0);
    if last % 2 != 0 {
        return Err(ChannelError::OddFeatureAxis(last));
    }
    let symbols = real
        .data()
        .chunks_exact(2)
        .map(|p| Complex64::new(p[0].f64(), p[1].f64()))
        .collect();
    ComplexSymbolVector::new(symbols, declared_power)
}

/// Inverse of [`pack_complex`].
pub fn unpack_complex<S: Scalar>(symbols: &ComplexSymbolVector, shape: &[usize]) -> Result<Tensor<S>> {
    let data: Vec<S> = symbols
        .symbols
        .iter()
        .flat_map(|s| [S::of(s.re), S::of(s.im)])
        .collect();
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(ChannelError::LengthMismatch(expected / 2, symbols.len()));
    }
    Ok(Tensor::from_vec(shape, data).expect("length checked"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn vector(symbols: &[Complex64]) -> ComplexSymbolVector {
        ComplexSymbolVector::new(symbols.to_vec(), 1.0).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let ones = vector(&[c(1.0, 0.0), c(1.0, 0.0)]);
        assert_eq!(normalize_power(&ones, 1.0).unwrap().symbols(), ones.symbols());

        let y = normalize_power(&vector(&[c(3.0, 4.0)]), 1.0).unwrap();
        assert!((y.symbols()[0] - c(0.6, 0.8)).norm() < 1e-15);

        let quad = [c(1.0, 0.0), c(0.0, 1.0), c(-1.0, 0.0), c(0.0, -1.0)];
        let scaled: Vec<_> = quad.iter().map(|s| s * 7.0).collect();
        let y = normalize_power(&vector(&scaled), 1.0).unwrap();
        for (a, b) in y.symbols().iter().zip(&quad) {
            assert!((a - b).norm() < 1e-15);
        }
    }

    #[test]
    fn normalize_rejects_zero_energy() {
        let z = vector(&[c(0.0, 0.0); 3]);
        assert_eq!(normalize_power(&z, 1.0), Err(ChannelError::ZeroEnergyInput));
    }

    #[test]
    fn noise_power_examples() {
        assert_eq!(snr_to_noise_power(0.0, 1.0, 1.0).unwrap(), 1.0);
        assert!((snr_to_noise_power(10.0, 1.0, 1.0).unwrap() - 0.1).abs() < 1e-15);
        assert!((snr_to_noise_power(1.0, 1.0, 1.0).unwrap() - 10f64.powf(-0.1)).abs() < 1e-15);
        assert_eq!(snr_to_noise_power(f64::INFINITY, 1.0, 1.0).unwrap(), 0.0);
        assert!(snr_to_noise_power(0.0, 0.0, 1.0).is_err());
        assert!(snr_to_noise_power(0.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn zero_variance_gain_is_zero() {
        let mut r = rng::stream(1, 0, "gain");
        assert_eq!(sample_rayleigh_gain(0.0, &mut r), c(0.0, 0.0));
    }

    #[test]
    fn rayleigh_gain_moments() {
        let mut r = rng::stream(2, 0, "gain");
        let big_h = 2.5;
        let n = 1_000_000;
        let (mut power, mut re2) = (0.0, 0.0);
        for _ in 0..n {
            let h = sample_rayleigh_gain(big_h, &mut r);
            power += h.norm_sqr();
            re2 += h.re * h.re;
        }
        assert!((power / n as f64 / big_h - 1.0).abs() < 0.01);
        assert!((re2 / n as f64 / (big_h / 2.0) - 1.0).abs() < 0.01);
    }

    #[test]
    fn noiseless_and_scaled_transfer() {
        let y = vector(&[c(0.3, -0.2), c(1.0, 0.5)]);
        let mut r = rng::stream(3, 0, "noise");
        let clean = ChannelState::awgn(f64::INFINITY, 1.0).unwrap();
        assert_eq!(apply_channel(&y, &clean, &mut r), y);

        let two = ChannelState::rayleigh(c(2.0, 0.0), f64::INFINITY, 1.0, 1.0).unwrap();
        let out = apply_channel(&y, &two, &mut r);
        for (a, b) in out.symbols().iter().zip(y.symbols()) {
            assert_eq!(*a, b * 2.0);
        }
    }

    #[test]
    fn noise_only_power() {
        let k = 1_000_000;
        let y = vector(&vec![c(0.0, 0.0); k]);
        let state = ChannelState::awgn(3.0, 1.0).unwrap();
        let out = apply_channel(&y, &state, &mut rng::stream(4, 0, "noise"));
        assert!((out.average_power() / state.sigma2() - 1.0).abs() < 0.01);
    }

    #[test]
    fn equalize_examples() {
        let y = vector(&[c(4.0, 0.0)]);
        assert_eq!(equalize(&y, c(1.0, 0.0)).unwrap(), y);
        assert_eq!(equalize(&y, c(2.0, 0.0)).unwrap().symbols(), &[c(2.0, 0.0)]);
        assert_eq!(equalize(&y, c(0.0, 0.0)), Err(ChannelError::SingularGain));

        let one = vector(&[c(1.0, 0.0)]);
        let state = ChannelState::rayleigh(c(0.0, 1.0), f64::INFINITY, 1.0, 1.0).unwrap();
        let rx = apply_channel(&one, &state, &mut rng::stream(5, 0, "noise"));
        let back = equalize(&rx, state.h()).unwrap();
        assert!((back.symbols()[0] - c(1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn equalized_noise_power_scales_with_gain() {
        let k = 1_000_000;
        let h = c(0.4, -0.3);
        let state = ChannelState::rayleigh(h, 5.0, 1.0, 1.0).unwrap();
        let y = vector(&vec![c(0.0, 0.0); k]);
        let rx = apply_channel(&y, &state, &mut rng::stream(6, 0, "noise"));
        let eq = equalize(&rx, h).unwrap();
        let expected = state.sigma2() / h.norm_sqr();
        assert!((eq.average_power() / expected - 1.0).abs() < 0.01);
    }

    #[test]
    fn pack_pairs_consecutive_entries() {
        let t = Tensor::<f64>::from_f64(&[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = pack_complex(&t, 1.0).unwrap();
        assert_eq!(v.symbols(), &[c(1.0, 2.0), c(3.0, 4.0)]);
        let odd = Tensor::<f64>::zeros(&[2, 3]);
        assert_eq!(pack_complex(&odd, 1.0), Err(ChannelError::OddFeatureAxis(3)));
    }

    #[test]
    fn pack_unpack_roundtrip() {
        let mut r = rng::stream(7, 0, "pack");
        let t = Tensor::<f32>::randn(&[3, 2, 8], &mut r);
        let v = pack_complex(&t, 1.0).unwrap();
        assert_eq!(v.len(), t.numel() / 2);
        let back: Tensor<f32> = unpack_complex(&v, t.shape()).unwrap();
        assert_eq!(back, t);
    }
}
