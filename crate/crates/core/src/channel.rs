//! Real-valued AWGN channel with SNR calibration and transmit-power
//! normalization.
//!
//! SNR is measured against the average power of the transmitted symbols.
//! With power normalization on, every transmitted block is scaled to unit mean
//! square before noise is added, so `noise_variance = 10^(-snr_db / 10)`. The
//! normalization scale travels as side information and is multiplied back at
//! the receiver.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ChannelSpec", into = "ChannelSpec")]
pub struct ChannelConfig {
    snr_db: f64,
    noise_variance: f64,
    normalize_power: bool,
}

/// On-disk form; the noise variance is always re-derived from the SNR.
#[derive(Serialize, Deserialize)]
struct ChannelSpec {
    #[serde(with = "crate::serde_ext::float")]
    snr_db: f64,
    #[serde(default = "default_true")]
    normalize_power: bool,
}

fn default_true() -> bool {
    true
}

impl TryFrom<ChannelSpec> for ChannelConfig {
    type Error = crate::error::Error;

    fn try_from(s: ChannelSpec) -> Result<Self> {
        ChannelConfig::new(s.snr_db, s.normalize_power)
    }
}

impl From<ChannelConfig> for ChannelSpec {
    fn from(c: ChannelConfig) -> Self {
        ChannelSpec {
            snr_db: c.snr_db,
            normalize_power: c.normalize_power,
        }
    }
}

impl ChannelConfig {
    /// `snr_db = +inf` is the noiseless channel.
    pub fn new(snr_db: f64, normalize_power: bool) -> Result<Self> {
        let noise_variance = if snr_db == f64::INFINITY {
            0.0
        } else {
            snr_to_noise_variance(snr_db, 1.0)?
        };
        Ok(ChannelConfig {
            snr_db,
            noise_variance,
            normalize_power,
        })
    }

    pub fn noiseless() -> Self {
        ChannelConfig {
            snr_db: f64::INFINITY,
            noise_variance: 0.0,
            normalize_power: true,
        }
    }

    pub fn snr_db(&self) -> f64 {
        self.snr_db
    }

    /// σ₂², in units of the (normalized) transmitted symbol power.
    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn normalize_power(&self) -> bool {
        self.normalize_power
    }

    pub fn is_noiseless(&self) -> bool {
        self.noise_variance == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    #[serde(with = "crate::serde_ext::float")]
    pub empirical_snr_db: f64,
    pub symbol_count: usize,
    pub mean_signal_power: f64,
}

pub fn snr_to_noise_variance(snr_db: f64, signal_power: f64) -> Result<f64> {
    if !signal_power.is_finite() || signal_power <= 0.0 {
        return Err(invalid(format!(
            "signal power must be positive and finite, got {signal_power}"
        )));
    }
    if !snr_db.is_finite() {
        return Err(invalid(format!("snr must be finite, got {snr_db}")));
    }
    Ok(signal_power * 10f64.powf(-snr_db / 10.0))
}

/// Scales `symbols` to unit mean square. Returns the scaled copy and the
/// divisor that was applied. An all-zero block is returned unchanged with
/// scale 1.
pub fn power_normalize<T: Scalar>(symbols: &[T]) -> Result<(Vec<T>, T)> {
    if symbols.is_empty() {
        return Err(invalid("cannot power-normalize an empty block"));
    }
    let scale = rms(symbols);
    if scale == T::zero() {
        return Ok((symbols.to_vec(), T::one()));
    }
    Ok((symbols.iter().map(|&v| v / scale).collect(), scale))
}

/// Root mean square of a block, accumulated in f64.
pub fn rms<T: Scalar>(symbols: &[T]) -> T {
    let ms = symbols.iter().map(|v| v.f64() * v.f64()).sum::<f64>() / symbols.len() as f64;
    T::of(ms.sqrt())
}

/// Adds i.i.d. `N(0, noise_variance)` noise. A noiseless channel returns the
/// input bit-exactly.
pub fn apply_awgn<T: Scalar, R: Rng + ?Sized>(
    symbols: &[T],
    config: &ChannelConfig,
    rng: &mut R,
) -> Vec<T> {
    if config.is_noiseless() {
        return symbols.to_vec();
    }
    let sigma = config.noise_variance.sqrt();
    symbols
        .iter()
        .map(|&s| s + T::of(sigma * rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

pub fn measure_empirical_snr<T: Scalar>(clean: &[T], noisy: &[T]) -> Result<ChannelReport> {
    if clean.len() != noisy.len() {
        return Err(invalid(format!(
            "length mismatch: {} clean vs {} noisy symbols",
            clean.len(),
            noisy.len()
        )));
    }
    if clean.is_empty() {
        return Err(invalid("cannot measure SNR of an empty block"));
    }
    let n = clean.len() as f64;
    let signal = clean.iter().map(|v| v.f64() * v.f64()).sum::<f64>() / n;
    let noise = clean
        .iter()
        .zip(noisy)
        .map(|(c, y)| {
            let d = y.f64() - c.f64();
            d * d
        })
        .sum::<f64>()
        / n;
    let empirical_snr_db = if noise == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (signal / noise).log10()
    };
    Ok(ChannelReport {
        empirical_snr_db,
        symbol_count: clean.len(),
        mean_signal_power: signal,
    })
}

/// One block after the channel, with what the backward pass needs.
#[derive(Debug, Clone)]
pub struct Transmission<T> {
    pub received: Vec<T>,
    /// Power-normalization divisor (1 when normalization is off).
    pub scale: T,
    /// Noise draws in normalized units; `received = input + scale * noise`.
    pub noise: Vec<T>,
}

/// Sends one block through the channel: normalize, add noise, undo the
/// normalization at the receiver. Computed as `x + s·n`, which equals
/// `(x/s + n)·s` exactly in real arithmetic.
pub fn transmit<T: Scalar, R: Rng + ?Sized>(
    symbols: &[T],
    config: &ChannelConfig,
    rng: &mut R,
) -> Result<Transmission<T>> {
    if symbols.is_empty() {
        return Err(invalid("cannot transmit an empty block"));
    }
    let scale = if config.normalize_power {
        let s = rms(symbols);
        if s == T::zero() {
            T::one()
        } else {
            s
        }
    } else {
        T::one()
    };
    if config.is_noiseless() {
        return Ok(Transmission {
            received: symbols.to_vec(),
            scale,
            noise: vec![T::zero(); symbols.len()],
        });
    }
    let zeros = vec![T::zero(); symbols.len()];
    let noise = apply_awgn(&zeros, config, rng);
    let received = symbols
        .iter()
        .zip(&noise)
        .map(|(&x, &n)| x + scale * n)
        .collect();
    Ok(Transmission {
        received,
        scale,
        noise,
    })
}

/// Gradient of `transmit` with respect to its input, given the upstream
/// gradient of the received block. Includes the dependence of the
/// normalization scale on the input.
pub fn transmit_backward<T: Scalar>(
    symbols: &[T],
    tx: &Transmission<T>,
    normalize_power: bool,
    grad_received: &[T],
) -> Vec<T> {
    let mut grad = grad_received.to_vec();
    let power_dependent = normalize_power && rms(symbols) != T::zero();
    if power_dependent {
        // d(s·n_j)/dx_i = n_j · x_i / (N s)
        let dot: f64 = grad_received
            .iter()
            .zip(&tx.noise)
            .map(|(g, n)| g.f64() * n.f64())
            .sum();
        if dot != 0.0 {
            let coef = dot / (symbols.len() as f64 * tx.scale.f64());
            for (g, &x) in grad.iter_mut().zip(symbols) {
                *g += T::of(coef * x.f64());
            }
        }
    }
    grad
}
