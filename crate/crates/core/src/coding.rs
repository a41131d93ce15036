//! The variational loss family and the reparameterization sampler.
//!
//! All three objectives share one reconstruction term, the mean squared error
//! in normalized pixel space. They differ in how the latent is regularized:
//!
//! * VSCC: KL between the received-latent posterior `N(μ₁, σ₁² + σ₂²)` and the
//!   channel-matched prior `N(0, σ₂² + d)`, where `d` is the channel matching
//!   coefficient (CMC).
//! * VAE: KL between the encoder posterior `N(μ, σ²)` and `N(0, 1)`.
//! * AE: no latent term.
//!
//! Every term is a mean over elements (and over the batch), so the
//! hyperparameters do not depend on image or latent resolution.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Vscc,
    Vae,
    Ae,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Vscc, Method::Vae, Method::Ae];

    /// Whether the encoder emits a log-variance map next to the mean.
    pub fn is_variational(self) -> bool {
        !matches!(self, Method::Ae)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Vscc => "vscc",
            Method::Vae => "vae",
            Method::Ae => "ae",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vscc" => Ok(Method::Vscc),
            "vae" => Ok(Method::Vae),
            "ae" => Ok(Method::Ae),
            other => Err(invalid(format!(
                "unknown method {other:?} (expected vscc, vae or ae)"
            ))),
        }
    }
}

/// Per-element Gaussian statistics emitted by the joint encoder, `[N, k, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats<T> {
    mean: Tensor<T>,
    log_variance: Tensor<T>,
}

impl<T: Scalar> LatentStats<T> {
    pub fn new(mean: Tensor<T>, log_variance: Tensor<T>) -> Result<Self> {
        if mean.shape() != log_variance.shape() {
            return Err(shape(format!(
                "mean {:?} vs log-variance {:?}",
                mean.shape(),
                log_variance.shape()
            )));
        }
        Ok(LatentStats { mean, log_variance })
    }

    pub fn mean(&self) -> &Tensor<T> {
        &self.mean
    }

    pub fn log_variance(&self) -> &Tensor<T> {
        &self.log_variance
    }

    pub fn variance(&self) -> Tensor<T> {
        self.log_variance.map(|v| v.exp())
    }

    pub fn into_parts(self) -> (Tensor<T>, Tensor<T>) {
        (self.mean, self.log_variance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub method: Method,
    pub cmc: f64,
    pub reconstruction_weight: f64,
    pub noise_variance: f64,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cmc > 0.0 && self.cmc.is_finite()) {
            return Err(invalid(format!("cmc must be positive, got {}", self.cmc)));
        }
        if !(self.reconstruction_weight > 0.0 && self.reconstruction_weight.is_finite()) {
            return Err(invalid(format!(
                "reconstruction_weight must be positive, got {}",
                self.reconstruction_weight
            )));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(invalid(format!(
                "noise_variance must be non-negative, got {}",
                self.noise_variance
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(with = "crate::serde_ext::float")]
    pub total: f64,
    #[serde(with = "crate::serde_ext::float")]
    pub channel_matching_term: f64,
    #[serde(with = "crate::serde_ext::float")]
    pub reconstruction_term: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.channel_matching_term.is_finite()
            && self.reconstruction_term.is_finite()
    }
}

/// Gradients of a loss with respect to the decoder output and, for the
/// variational methods, the encoder statistics.
#[derive(Debug, Clone)]
pub struct LossGradients<T> {
    pub reconstructed: Tensor<T>,
    pub mean: Option<Tensor<T>>,
    pub log_variance: Option<Tensor<T>>,
}

/// Closed-form `KL(N(μ₁, σ₁²+σ₂²) || N(0, σ₂²+d))`, averaged over elements.
pub fn gaussian_kl_channel_matched<T: Scalar>(
    stats: &LatentStats<T>,
    noise_variance: f64,
    cmc: f64,
) -> Result<f64> {
    Ok(channel_matched_kl_with_grad(stats, noise_variance, cmc, false)?.0)
}

fn check_kl_args(noise_variance: f64, cmc: f64) -> Result<()> {
    if !(noise_variance >= 0.0) {
        return Err(invalid(format!(
            "noise variance must be non-negative, got {noise_variance}"
        )));
    }
    if !(cmc > 0.0) {
        return Err(invalid(format!("cmc must be positive, got {cmc}")));
    }
    Ok(())
}

type KlParts<T> = (f64, Option<(Tensor<T>, Tensor<T>)>);

fn channel_matched_kl_with_grad<T: Scalar>(
    stats: &LatentStats<T>,
    noise_variance: f64,
    cmc: f64,
    with_grad: bool,
) -> Result<KlParts<T>> {
    check_kl_args(noise_variance, cmc)?;
    let prior = noise_variance + cmc;
    let n = stats.mean.len() as f64;
    let mut sum = 0.0;
    let (mut gm, mut glv) = if with_grad {
        (
            Some(Tensor::zeros(stats.mean.shape())),
            Some(Tensor::zeros(stats.mean.shape())),
        )
    } else {
        (None, None)
    };
    for (i, (&mu, &lv)) in stats
        .mean
        .data()
        .iter()
        .zip(stats.log_variance.data())
        .enumerate()
    {
        let (mu, lv) = (mu.f64(), lv.f64());
        let v1 = lv.exp();
        let post = v1 + noise_variance;
        sum += 0.5 * ((prior / post).ln() + (mu * mu + post) / prior - 1.0);
        if let (Some(gm), Some(glv)) = (gm.as_mut(), glv.as_mut()) {
            gm.data_mut()[i] = T::of(mu / prior / n);
            glv.data_mut()[i] = T::of(0.5 * (v1 / prior - v1 / post) / n);
        }
    }
    Ok((sum / n, gm.zip(glv)))
}

/// `KL(N(μ, σ²) || N(0, 1))` averaged over elements.
pub fn standard_normal_kl<T: Scalar>(stats: &LatentStats<T>) -> f64 {
    standard_normal_kl_with_grad(stats, false).0
}

fn standard_normal_kl_with_grad<T: Scalar>(
    stats: &LatentStats<T>,
    with_grad: bool,
) -> KlParts<T> {
    let n = stats.mean.len() as f64;
    let mut sum = 0.0;
    let mut grads = with_grad.then(|| {
        (
            Tensor::zeros(stats.mean.shape()),
            Tensor::zeros(stats.mean.shape()),
        )
    });
    for (i, (&mu, &lv)) in stats
        .mean
        .data()
        .iter()
        .zip(stats.log_variance.data())
        .enumerate()
    {
        let (mu, lv) = (mu.f64(), lv.f64());
        let v = lv.exp();
        sum += 0.5 * (-lv + v + mu * mu - 1.0);
        if let Some((gm, glv)) = grads.as_mut() {
            gm.data_mut()[i] = T::of(mu / n);
            glv.data_mut()[i] = T::of(0.5 * (v - 1.0) / n);
        }
    }
    (sum / n, grads)
}

/// Draws `center + sqrt(variance) * ε` with `ε ~ N(0, 1)` i.i.d.
pub fn reparameterize<T: Scalar, R: Rng + ?Sized>(
    center: &[T],
    variance: &[T],
    rng: &mut R,
) -> Result<Vec<T>> {
    let eps: Vec<T> = (0..center.len())
        .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    reparameterize_with(center, variance, &eps)
}

/// Deterministic half of [`reparameterize`] with the standard-normal draws
/// supplied by the caller. Zero variance returns `center` exactly.
pub fn reparameterize_with<T: Scalar>(center: &[T], variance: &[T], eps: &[T]) -> Result<Vec<T>> {
    if center.len() != variance.len() || center.len() != eps.len() {
        return Err(shape(format!(
            "center {}, variance {}, noise {} lengths differ",
            center.len(),
            variance.len(),
            eps.len()
        )));
    }
    if let Some(v) = variance.iter().find(|v| !(**v >= T::zero())) {
        return Err(invalid(format!("variance must be non-negative, got {v:?}")));
    }
    Ok(center
        .iter()
        .zip(variance)
        .zip(eps)
        .map(|((&c, &v), &e)| if v == T::zero() { c } else { c + v.sqrt() * e })
        .collect())
}

/// Pathwise gradients of `center + sqrt(variance) * ε` given the upstream
/// gradient: `(d/dcenter, d/dvariance)`.
pub fn reparameterize_backward<T: Scalar>(
    variance: &[T],
    eps: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let half = T::of(0.5);
    let dvar = variance
        .iter()
        .zip(eps)
        .zip(grad_out)
        .map(|((&v, &e), &g)| {
            if v > T::zero() {
                g * e * half / v.sqrt()
            } else {
                T::zero()
            }
        })
        .collect();
    (grad_out.to_vec(), dvar)
}

/// Mean squared error; the `-log q(x|z)` term up to scale and constant.
pub fn reconstruction_nll<T: Scalar>(original: &Tensor<T>, reconstructed: &Tensor<T>) -> Result<f64> {
    if original.shape() != reconstructed.shape() {
        return Err(shape(format!(
            "original {:?} vs reconstructed {:?}",
            original.shape(),
            reconstructed.shape()
        )));
    }
    if original.is_empty() {
        return Err(invalid("empty images"));
    }
    let sum: f64 = original
        .data()
        .iter()
        .zip(reconstructed.data())
        .map(|(a, b)| {
            let d = a.f64() - b.f64();
            d * d
        })
        .sum();
    Ok(sum / original.len() as f64)
}

fn mse_grad<T: Scalar>(original: &Tensor<T>, reconstructed: &Tensor<T>, weight: f64) -> Tensor<T> {
    let scale = T::of(2.0 * weight / original.len() as f64);
    reconstructed
        .zip_map(original, |r, o| scale * (r - o))
        .expect("shapes checked by reconstruction_nll")
}

fn expect_method(config: &LossConfig, method: Method) -> Result<()> {
    if config.method != method {
        return Err(Error::UnsupportedMethod(format!(
            "{} loss called with a {} configuration",
            method, config.method
        )));
    }
    config.validate()
}

pub fn vscc_loss<T: Scalar>(
    original: &Tensor<T>,
    reconstructed: &Tensor<T>,
    stats: &LatentStats<T>,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    expect_method(config, Method::Vscc)?;
    Ok(loss_and_grad(original, reconstructed, Some(stats), config, false)?.0)
}

pub fn vae_loss<T: Scalar>(
    original: &Tensor<T>,
    reconstructed: &Tensor<T>,
    stats: &LatentStats<T>,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    expect_method(config, Method::Vae)?;
    Ok(loss_and_grad(original, reconstructed, Some(stats), config, false)?.0)
}

pub fn ae_loss<T: Scalar>(original: &Tensor<T>, reconstructed: &Tensor<T>) -> Result<LossBreakdown> {
    let mse = reconstruction_nll(original, reconstructed)?;
    Ok(LossBreakdown {
        total: mse,
        channel_matching_term: 0.0,
        reconstruction_term: mse,
    })
}

/// Evaluates the configured objective and, when `with_grad`, its gradients.
/// Variational methods require `stats`.
pub fn loss_and_grad<T: Scalar>(
    original: &Tensor<T>,
    reconstructed: &Tensor<T>,
    stats: Option<&LatentStats<T>>,
    config: &LossConfig,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<LossGradients<T>>)> {
    config.validate()?;
    let mse = reconstruction_nll(original, reconstructed)?;
    match config.method {
        Method::Ae => {
            let grads = with_grad.then(|| LossGradients {
                reconstructed: mse_grad(original, reconstructed, 1.0),
                mean: None,
                log_variance: None,
            });
            Ok((
                LossBreakdown {
                    total: mse,
                    channel_matching_term: 0.0,
                    reconstruction_term: mse,
                },
                grads,
            ))
        }
        Method::Vscc | Method::Vae => {
            let stats = stats.ok_or_else(|| {
                Error::UnsupportedMethod(format!("{} loss needs latent statistics", config.method))
            })?;
            let (kl, kl_grads) = if config.method == Method::Vscc {
                channel_matched_kl_with_grad(stats, config.noise_variance, config.cmc, with_grad)?
            } else {
                standard_normal_kl_with_grad(stats, with_grad)
            };
            let grads = kl_grads.map(|(gm, glv)| LossGradients {
                reconstructed: mse_grad(original, reconstructed, config.reconstruction_weight),
                mean: Some(gm),
                log_variance: Some(glv),
            });
            Ok((
                LossBreakdown {
                    total: config.reconstruction_weight * mse + kl,
                    channel_matching_term: kl,
                    reconstruction_term: mse,
                },
                grads,
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn stats1(mu: f64, var: f64) -> LatentStats<f64> {
        LatentStats::new(
            Tensor::full([1, 1, 1, 1], mu),
            Tensor::full([1, 1, 1, 1], var.ln()),
        )
        .unwrap()
    }

    fn gauss_logpdf(x: f64, mean: f64, var: f64) -> f64 {
        -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean) * (x - mean) / var)
    }

    /// Plain Monte Carlo `E_p[log p - log q]` with `p = N(mu, vp)`, `q = N(0, vq)`.
    fn mc_kl(mu: f64, vp: f64, vq: f64, n: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = vp.sqrt();
        (0..n)
            .map(|_| {
                let y = mu + sd * rng.sample::<f64, _>(StandardNormal);
                gauss_logpdf(y, mu, vp) - gauss_logpdf(y, 0.0, vq)
            })
            .sum::<f64>()
            / n as f64
    }

    fn cfg(method: Method, noise_variance: f64, cmc: f64) -> LossConfig {
        LossConfig {
            method,
            cmc,
            reconstruction_weight: 1.0,
            noise_variance,
        }
    }

    #[test]
    fn channel_matched_kl_examples() {
        for s2 in [0.0, 0.3, 4.0] {
            let kl = gaussian_kl_channel_matched(&stats1(0.0, 2.5), s2, 2.5).unwrap();
            assert!(kl.abs() < 1e-15, "{kl}");
        }

        let kl = gaussian_kl_channel_matched(&stats1(1.0, 1.0), 0.0, 1.0).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
        let mc = mc_kl(1.0, 1.0, 1.0, 1_000_000, 1);
        assert!((mc - kl).abs() / kl < 0.01, "mc {mc}");

        // ½(log 2 − ½) = 0.09657359027997264
        let kl = gaussian_kl_channel_matched(&stats1(0.0, 1.0), 1.0, 3.0).unwrap();
        assert!((kl - 0.096_573_590_279_972_64).abs() < 1e-12);
        let mc = mc_kl(0.0, 2.0, 4.0, 1_000_000, 2);
        assert!((mc - kl).abs() / kl < 0.01, "mc {mc}");
    }

    #[test]
    fn kl_rejects_bad_arguments() {
        let s = stats1(0.0, 1.0);
        assert!(gaussian_kl_channel_matched(&s, -1.0, 1.0).is_err());
        assert!(gaussian_kl_channel_matched(&s, 1.0, 0.0).is_err());
        assert!(LatentStats::new(
            Tensor::<f64>::zeros([1, 2, 1, 1]),
            Tensor::zeros([1, 1, 2, 1])
        )
        .is_err());
    }

    #[test]
    fn vae_kl_examples() {
        let x = Tensor::<f64>::zeros([1, 1, 2, 2]);
        let c = cfg(Method::Vae, 0.0, 1.0);
        let l = vae_loss(&x, &x, &stats1(0.0, 1.0), &c).unwrap();
        assert_eq!(l.total, 0.0);
        let l = vae_loss(&x, &x, &stats1(1.0, 1.0), &c).unwrap();
        assert!((l.channel_matching_term - 0.5).abs() < 1e-15);
        let mc = mc_kl(1.0, 1.0, 1.0, 1_000_000, 3);
        assert!((mc - 0.5).abs() / 0.5 < 0.01);
    }

    #[test]
    fn reconstruction_examples() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![0.1, -0.4, 0.9, 0.0]).unwrap();
        assert_eq!(reconstruction_nll(&x, &x).unwrap(), 0.0);
        let zeros = Tensor::<f64>::zeros([1, 3, 4, 4]);
        let ones = Tensor::full([1, 3, 4, 4], 1.0);
        assert_eq!(reconstruction_nll(&zeros, &ones).unwrap(), 1.0);
        let shifted = x.map(|v| v + 0.5);
        assert!((reconstruction_nll(&x, &shifted).unwrap() - 0.25).abs() < 1e-15);
        assert!(reconstruction_nll(&x, &zeros).is_err());
    }

    #[test]
    fn ae_loss_examples() {
        let zeros = Tensor::<f64>::zeros([2, 3, 4, 4]);
        assert_eq!(ae_loss(&zeros, &zeros).unwrap().total, 0.0);
        let l = ae_loss(&zeros, &Tensor::full([2, 3, 4, 4], 0.1)).unwrap();
        assert!((l.total - 0.01).abs() < 1e-15);
        assert_eq!(l.channel_matching_term, 0.0);
    }

    #[test]
    fn vscc_loss_vanishes_at_prior_with_perfect_reconstruction() {
        let x = Tensor::<f64>::full([1, 3, 2, 2], 0.3);
        let l = vscc_loss(&x, &x, &stats1(0.0, 5.0), &cfg(Method::Vscc, 0.7, 5.0)).unwrap();
        assert!(l.total.abs() < 1e-15);
    }

    #[test]
    fn method_mismatch_is_rejected() {
        let x = Tensor::<f64>::zeros([1, 1, 1, 1]);
        assert!(vscc_loss(&x, &x, &stats1(0.0, 1.0), &cfg(Method::Vae, 0.0, 1.0)).is_err());
        assert!(vae_loss(&x, &x, &stats1(0.0, 1.0), &cfg(Method::Vscc, 0.0, 1.0)).is_err());
    }

    #[test]
    fn ratio_term_decreases_over_cmc_grid() {
        // (μ²+σ₁²+σ₂²)/(σ₂²+d) with σ₁² below every grid value of d
        let (mu, v1, s2) = (0.4f64, 0.8, 0.3);
        let ratio = |d: f64| (mu * mu + v1 + s2) / (s2 + d);
        let grid = [1.0, 2.0, 5.0, 10.0, 15.0];
        for w in grid.windows(2) {
            assert!(ratio(w[1]) < ratio(w[0]));
        }
    }

    fn random_problem(seed: u64) -> (Tensor<f64>, Tensor<f64>, LatentStats<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |shape: [usize; 4], lo: f64, hi: f64| {
            let n = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
        };
        let x = t([2, 3, 4, 4], -1.0, 1.0);
        let y = t([2, 3, 4, 4], -1.0, 1.0);
        let m = t([2, 2, 2, 2], -2.0, 2.0);
        let lv = t([2, 2, 2, 2], -3.0, 2.0);
        (x, y, LatentStats::new(m, lv).unwrap())
    }

    #[test]
    fn vscc_reduces_to_vae_without_noise_and_unit_cmc() {
        for seed in 0..50 {
            let (x, y, s) = random_problem(seed);
            let a = vscc_loss(&x, &y, &s, &cfg(Method::Vscc, 0.0, 1.0)).unwrap();
            let b = vae_loss(&x, &y, &s, &cfg(Method::Vae, 0.0, 1.0)).unwrap();
            assert!((a.total - b.total).abs() <= 1e-9 * b.total.abs());
        }
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        let h = 1e-5;
        for method in Method::ALL {
            let (x, y, s) = random_problem(7);
            let c = LossConfig {
                method,
                cmc: 2.0,
                reconstruction_weight: 3.0,
                noise_variance: 0.4,
            };
            let f = |y: &Tensor<f64>, m: &Tensor<f64>, lv: &Tensor<f64>| {
                let st = LatentStats::new(m.clone(), lv.clone()).unwrap();
                loss_and_grad(&x, y, Some(&st), &c, false).unwrap().0.total
            };
            let (_, g) = loss_and_grad(&x, &y, Some(&s), &c, true).unwrap();
            let g = g.unwrap();
            let (m, lv) = (s.mean().clone(), s.log_variance().clone());

            let check = |analytic: f64, plus: f64, minus: f64| {
                let fd = (plus - minus) / (2.0 * h);
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-4, "{method}: analytic {analytic} vs fd {fd}");
            };
            for i in (0..y.len()).step_by(7) {
                let mut p = y.clone();
                p.data_mut()[i] += h;
                let mut q = y.clone();
                q.data_mut()[i] -= h;
                check(g.reconstructed.data()[i], f(&p, &m, &lv), f(&q, &m, &lv));
            }
            if method.is_variational() {
                let (gm, glv) = (g.mean.unwrap(), g.log_variance.unwrap());
                for i in 0..m.len() {
                    let mut p = m.clone();
                    p.data_mut()[i] += h;
                    let mut q = m.clone();
                    q.data_mut()[i] -= h;
                    check(gm.data()[i], f(&y, &p, &lv), f(&y, &q, &lv));
                    let mut p = lv.clone();
                    p.data_mut()[i] += h;
                    let mut q = lv.clone();
                    q.data_mut()[i] -= h;
                    check(glv.data()[i], f(&y, &m, &p), f(&y, &m, &q));
                }
            }
        }
    }

    #[test]
    fn reparameterize_examples() {
        let c = vec![0.5f64, -1.0, 2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(reparameterize(&c, &[0.0; 3], &mut rng).unwrap(), c);
        assert!(reparameterize(&c, &[1.0, -0.1, 1.0], &mut rng).is_err());

        let n = 1_000_000;
        let y = reparameterize(&vec![0.0f64; n], &vec![1.0; n], &mut rng).unwrap();
        let mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.004, "{mean}");
        assert!((0.995..=1.005).contains(&var), "{var}");

        let a = reparameterize(&c, &[0.2, 0.3, 0.4], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = reparameterize(&c, &[0.2, 0.3, 0.4], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pathwise_gradient_matches_expectation_differences() {
        // f(y) = (y - a)^2, so E f = (μ - a)^2 + σ².
        let (mu, var, a) = (0.7f64, 0.5, -0.3);
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let expect_f = |mu: f64, var: f64| {
            let y = reparameterize_with(&vec![mu; n], &vec![var; n], &eps).unwrap();
            y.iter().map(|y| (y - a) * (y - a)).sum::<f64>() / n as f64
        };
        let y = reparameterize_with(&vec![mu; n], &vec![var; n], &eps).unwrap();
        let upstream: Vec<f64> = y.iter().map(|y| 2.0 * (y - a) / n as f64).collect();
        let (dc, dv) = reparameterize_backward(&vec![var; n], &eps, &upstream);
        let (dmu, dvar): (f64, f64) = (dc.iter().sum(), dv.iter().sum());

        let h = 1e-4;
        let fd_mu = (expect_f(mu + h, var) - expect_f(mu - h, var)) / (2.0 * h);
        let fd_var = (expect_f(mu, var + h) - expect_f(mu, var - h)) / (2.0 * h);
        assert!((dmu - fd_mu).abs() / fd_mu.abs() < 0.02);
        assert!((dvar - fd_var).abs() / fd_var.abs() < 0.02);
        // and both agree with the analytic expectation within sampling error
        assert!((dmu - 2.0 * (mu - a)).abs() / (2.0 * (mu - a)) < 0.02);
        assert!((dvar - 1.0).abs() < 0.02);
    }

    proptest! {
        #[test]
        fn channel_matched_kl_is_non_negative(
            mu in -5.0f64..5.0,
            lv in -8.0f64..4.0,
            s2 in 0.0f64..10.0,
            d in 0.01f64..20.0,
        ) {
            let s = LatentStats::new(Tensor::full([1, 1, 1, 1], mu), Tensor::full([1, 1, 1, 1], lv)).unwrap();
            prop_assert!(gaussian_kl_channel_matched(&s, s2, d).unwrap() >= -1e-9);
        }

        #[test]
        fn total_is_weighted_sum(seed in 0u64..1000, w in 0.1f64..100.0) {
            let (x, y, s) = random_problem(seed);
            let c = LossConfig { method: Method::Vscc, cmc: 5.0, reconstruction_weight: w, noise_variance: 0.3 };
            let l = vscc_loss(&x, &y, &s, &c).unwrap();
            let expect = w * l.reconstruction_term + l.channel_matching_term;
            prop_assert!((l.total - expect).abs() <= 1e-9 * expect.abs());
        }
    }
}
