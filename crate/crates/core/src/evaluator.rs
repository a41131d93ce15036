//! Image-quality metrics and checkpoint evaluation over a test-SNR axis.
//!
//! Metrics are computed on 8-bit pixels in `[H, W, C]` order.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::coding::{reparameterize_with, Method};
use crate::datapipe::{ImageBatch, ImageSet, KnowledgeBase};
use crate::error::{invalid, shape, Error, Result};
use crate::fingerprint::{code_version, sha256_hex};
use crate::network::checkpoint::{write_atomic, Checkpoint};
use crate::network::{EncoderOutput, Network};
use crate::serde_ext;
use crate::tensor::Tensor;
use crate::trainer::{standard_normal, transmit_batch};

/// Sharpness of the variance rectifier in transmission-variance mode.
pub const VARIANCE_RECTIFIER_SHARPNESS: f64 = 10.0;

/// Display cap for infinite PSNR in plots.
pub const PSNR_PLOT_CAP_DB: f64 = 100.0;

/// `10 log10(L² / MSE)`; identical inputs give `+inf`.
pub fn psnr(reference: &[u8], candidate: &[u8], dynamic_range: f64) -> Result<f64> {
    if reference.len() != candidate.len() {
        return Err(shape(format!(
            "reference has {} values, candidate {}",
            reference.len(),
            candidate.len()
        )));
    }
    if reference.is_empty() {
        return Err(invalid("psnr of empty images"));
    }
    if !(dynamic_range > 0.0 && dynamic_range.is_finite()) {
        return Err(invalid(format!("dynamic range must be positive, got {dynamic_range}")));
    }
    let sse: u64 = reference
        .iter()
        .zip(candidate)
        .map(|(&a, &b)| {
            let d = a.abs_diff(b) as u64;
            d * d
        })
        .sum();
    if sse == 0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse as f64 / reference.len() as f64;
    Ok(10.0 * (dynamic_range * dynamic_range / mse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub window_size: usize,
    pub gaussian_sigma: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig::with_dynamic_range(255.0)
    }
}

impl SsimConfig {
    pub fn with_dynamic_range(l: f64) -> Self {
        let c2 = (0.03 * l) * (0.03 * l);
        SsimConfig {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            c1: (0.01 * l) * (0.01 * l),
            c2,
            c3: c2 / 2.0,
            window_size: 11,
            gaussian_sigma: 1.5,
            dynamic_range: l,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if ![self.c1, self.c2, self.c3, self.gaussian_sigma, self.dynamic_range]
            .into_iter()
            .all(positive)
        {
            return Err(invalid("ssim stabilizers, window sigma and dynamic range must be positive"));
        }
        if self.window_size == 0 {
            return Err(invalid("ssim window size must be positive"));
        }
        if ![self.alpha, self.beta, self.gamma].iter().all(|e| e.is_finite()) {
            return Err(invalid("ssim exponents must be finite"));
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian taps.
    pub fn taps(&self) -> Vec<f64> {
        let half = (self.window_size as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window_size)
            .map(|i| {
                let d = i as f64 - half;
                (-d * d / (2.0 * self.gaussian_sigma * self.gaussian_sigma)).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    /// Combines window statistics into the comparison score.
    pub fn combine(&self, mx: f64, my: f64, vx: f64, vy: f64, cov: f64) -> f64 {
        let (vx, vy) = (vx.max(0.0), vy.max(0.0));
        let (sx, sy) = (vx.sqrt(), vy.sqrt());
        let l = (2.0 * mx * my + self.c1) / (mx * mx + my * my + self.c1);
        let c = (2.0 * sx * sy + self.c2) / (vx + vy + self.c2);
        let s = (cov + self.c3) / (sx * sy + self.c3);
        pow(l, self.alpha) * pow(c, self.beta) * pow(s, self.gamma)
    }
}

fn pow(v: f64, e: f64) -> f64 {
    if e == 1.0 {
        v
    } else {
        v.powf(e)
    }
}

/// Mean structural similarity over all valid windows of every channel.
/// `shape` is `[H, W, C]`.
pub fn ssim(reference: &[u8], candidate: &[u8], shape3: [usize; 3], config: &SsimConfig) -> Result<f64> {
    config.validate()?;
    let [h, w, c] = shape3;
    if reference.len() != h * w * c || candidate.len() != h * w * c {
        return Err(shape(format!(
            "images must have {h}x{w}x{c} values, got {} and {}",
            reference.len(),
            candidate.len()
        )));
    }
    let k = config.window_size;
    if h < k || w < k {
        return Err(invalid(format!("image {h}x{w} is smaller than the {k}x{k} ssim window")));
    }
    let taps = config.taps();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut total = 0.0;
    let mut plane = [vec![0.0; h * w], vec![0.0; h * w], vec![0.0; h * w], vec![0.0; h * w], vec![0.0; h * w]];
    for ch in 0..c {
        for i in 0..h * w {
            let x = reference[i * c + ch] as f64;
            let y = candidate[i * c + ch] as f64;
            plane[0][i] = x;
            plane[1][i] = y;
            plane[2][i] = x * x;
            plane[3][i] = y * y;
            plane[4][i] = x * y;
        }
        let f: Vec<Vec<f64>> = plane.iter().map(|p| separable_valid(p, h, w, &taps)).collect();
        for i in 0..oh * ow {
            let (mx, my) = (f[0][i], f[1][i]);
            total += config.combine(mx, my, f[2][i] - mx * mx, f[3][i] - my * my, f[4][i] - mx * my);
        }
    }
    Ok(total / (c * oh * ow) as f64)
}

/// Valid-mode 2-D filtering with the outer product of `taps`.
fn separable_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(t, &g)| g * src[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(t, &g)| g * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    #[serde(with = "serde_ext::float")]
    pub mean: f64,
    #[serde(with = "serde_ext::float")]
    pub min: f64,
    #[serde(with = "serde_ext::float")]
    pub max: f64,
}

/// Mean and extrema of per-resample scores.
pub fn aggregate_resamples(scores: &[f64]) -> Result<Spread> {
    if scores.is_empty() {
        return Err(invalid("cannot aggregate an empty score list"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Summing in sorted order makes the mean independent of input order.
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    // Guards against rounding pushing the mean past an extremum.
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    Ok(Spread {
        mean: if mean.is_nan() { mean } else { mean.clamp(min, max) },
        min,
        max,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EvalMode {
    /// Channel output decoded directly (AE checkpoints).
    #[serde(rename = "ae")]
    AeDirect,
    /// Mean and variance maps both cross the channel.
    #[serde(rename = "transmission")]
    TransmissionVariance,
    /// Only the mean crosses; the variance comes from the knowledge base.
    #[serde(rename = "fixed")]
    FixedVariance,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::AeDirect => "ae",
            EvalMode::TransmissionVariance => "transmission",
            EvalMode::FixedVariance => "fixed",
        }
    }

    pub fn compatible_with(self, method: Method) -> bool {
        match self {
            EvalMode::AeDirect => method == Method::Ae,
            _ => method.is_variational(),
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ae" | "ae_direct" => Ok(EvalMode::AeDirect),
            "transmission" | "transmission_variance" => Ok(EvalMode::TransmissionVariance),
            "fixed" | "fixed_variance" => Ok(EvalMode::FixedVariance),
            other => Err(invalid(format!(
                "unknown evaluation mode {other:?} (expected ae, transmission or fixed)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: EvalMode,
    /// `inf` evaluates a noiseless channel.
    #[serde(with = "serde_ext::float_vec")]
    pub test_snr_db: Vec<f64>,
    pub resample_count: usize,
    pub seed: u64,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
    /// Ablation: send the variance map over a noiseless link.
    #[serde(default)]
    pub noiseless_variance_link: bool,
    /// Ablation: resample with the received variance alone, without the
    /// channel noise variance.
    #[serde(default)]
    pub omit_channel_variance: bool,
    #[serde(default)]
    pub ssim: SsimConfig,
    /// Evaluate only the first images of the test split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_images: Option<usize>,
    #[serde(skip)]
    pub knowledge_base: Option<KnowledgeBase>,
}

fn default_eval_batch() -> usize {
    32
}

impl EvalConfig {
    pub fn new(mode: EvalMode, test_snr_db: Vec<f64>, resample_count: usize, seed: u64) -> Self {
        EvalConfig {
            mode,
            test_snr_db,
            resample_count,
            seed,
            batch_size: default_eval_batch(),
            noiseless_variance_link: false,
            omit_channel_variance: false,
            ssim: SsimConfig::default(),
            max_images: None,
            knowledge_base: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resample_count == 0 {
            return Err(Error::Config("resample_count must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.test_snr_db.is_empty() {
            return Err(Error::Config("no test SNRs given".into()));
        }
        if let Some(s) = self.test_snr_db.iter().find(|s| s.is_nan() || **s == f64::NEG_INFINITY) {
            return Err(Error::Config(format!("invalid test SNR {s}")));
        }
        if self.mode == EvalMode::FixedVariance && self.knowledge_base.is_none() {
            return Err(Error::Config(
                "fixed-variance evaluation needs a knowledge base; build one with `kb-build`".into(),
            ));
        }
        self.ssim.validate()
    }

    /// Hash of the serialized config plus the knowledge base, if any.
    pub fn fingerprint(&self) -> String {
        let mut bytes = serde_json::to_vec(self).expect("config serializes");
        if let Some(kb) = &self.knowledge_base {
            bytes.extend(serde_json::to_vec(kb).expect("knowledge base serializes"));
        }
        sha256_hex(&bytes)
    }
}

/// Scores of one test image at one test SNR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_index: usize,
    pub path: PathBuf,
    pub label: String,
    #[serde(with = "serde_ext::float")]
    pub test_snr_db: f64,
    pub psnr: Spread,
    pub ssim: Spread,
}

/// Means over images of the per-image statistics at one test SNR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrAggregate {
    #[serde(with = "serde_ext::float")]
    pub test_snr_db: f64,
    pub images: usize,
    pub psnr: Spread,
    pub ssim: Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: Method,
    #[serde(with = "serde_ext::float")]
    pub train_snr_db: f64,
    pub cmc: f64,
    pub checkpoint_fingerprint: String,
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
    pub eval_fingerprint: String,
    /// Fingerprint of the experiment config that drove the run, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment_fingerprint: Option<String>,
    pub code_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub provenance: Provenance,
    pub config: EvalConfig,
    pub records: Vec<ImageRecord>,
    pub aggregates: Vec<SnrAggregate>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Positive version of a received variance value with scale `s`:
/// `(s/β)·softplus(β·v/s)`, close to `v` when `v ≫ s/β`.
pub fn rectify_variance(v: f64, scale: f64) -> f64 {
    let b = VARIANCE_RECTIFIER_SHARPNESS;
    scale / b * softplus(b * v / scale)
}

/// What the receiver resamples around, per image.
struct Received {
    center: Tensor<f32>,
    /// Sampling variance per element; `None` for direct decoding.
    variance: Option<Tensor<f32>>,
}

fn receive<R: Rng + ?Sized>(
    out: &EncoderOutput<f32>,
    channel: &ChannelConfig,
    config: &EvalConfig,
    rng: &mut R,
) -> Result<Received> {
    let (center, txs) = transmit_batch(out.mean(), channel, rng)?;
    let variance = match config.mode {
        EvalMode::AeDirect => None,
        EvalMode::FixedVariance => {
            let kb = config.knowledge_base.as_ref().expect("validated");
            let per: Vec<f32> = kb.per_element_variance.iter().map(|&v| v as f32).collect();
            if per.len() != center.sample_len() {
                return Err(shape(format!(
                    "knowledge base has {} elements, latent has {}",
                    per.len(),
                    center.sample_len()
                )));
            }
            let mut v = Tensor::zeros(center.shape());
            for b in 0..center.batch() {
                v.sample_mut(b).copy_from_slice(&per);
            }
            Some(v)
        }
        EvalMode::TransmissionVariance => {
            let stats = out.stats().expect("mode checked against method");
            let sent = stats.variance();
            let link = if config.noiseless_variance_link {
                ChannelConfig::noiseless()
            } else {
                *channel
            };
            let (rx, vtx) = transmit_batch(&sent, &link, rng)?;
            let mut v = Tensor::zeros(center.shape());
            for b in 0..center.batch() {
                let sv = vtx[b].scale as f64;
                let sm = txs[b].scale as f64;
                let channel_var = if config.omit_channel_variance {
                    0.0
                } else {
                    sm * sm * channel.noise_variance()
                };
                for (dst, &r) in v.sample_mut(b).iter_mut().zip(rx.sample(b)) {
                    *dst = (rectify_variance(r as f64, sv) + channel_var) as f32;
                }
            }
            Some(v)
        }
    };
    Ok(Received { center, variance })
}

fn test_channel(snr_db: f64, normalize_power: bool) -> Result<ChannelConfig> {
    if snr_db == f64::INFINITY {
        Ok(ChannelConfig::noiseless())
    } else {
        ChannelConfig::new(snr_db, normalize_power)
    }
}

fn rng_for(seed: u64, snr_db: f64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(snr_db.to_bits());
    r
}

/// Scores a checkpoint on `test` at every configured test SNR.
pub fn evaluate(checkpoint: &Checkpoint, test: &ImageSet, config: &EvalConfig) -> Result<EvalResult> {
    config.validate()?;
    let meta = &checkpoint.metadata;
    if !config.mode.compatible_with(meta.method) {
        return Err(Error::Config(format!(
            "evaluation mode {} cannot be used with a {} checkpoint",
            config.mode, meta.method
        )));
    }
    let net: Network<f32> = checkpoint.build_network()?;
    let arch = net.config();
    if test.size() != arch.image_size {
        return Err(Error::Config(format!(
            "test images are {0}x{0} but the checkpoint expects {1}x{1}",
            test.size(),
            arch.image_size
        )));
    }
    if let Some(kb) = config.knowledge_base.as_ref().filter(|_| config.mode == EvalMode::FixedVariance) {
        if kb.shape != arch.latent_shape() {
            return Err(Error::Config(format!(
                "knowledge base shape {:?} does not match latent shape {:?}",
                kb.shape,
                arch.latent_shape()
            )));
        }
    }
    let n_images = config.max_images.map_or(test.len(), |m| m.min(test.len()));
    if n_images == 0 {
        return Err(invalid("test split is empty"));
    }
    let [c, h, w] = arch.image_shape();
    let indices: Vec<usize> = (0..n_images).collect();
    let batches: Vec<&[usize]> = indices.chunks(config.batch_size).collect();
    let mut encoded = Vec::with_capacity(batches.len());
    for b in &batches {
        let x = test.batch(b)?.normalized::<f32>();
        encoded.push(net.encoder.encode(x)?);
    }

    let mut records = Vec::with_capacity(n_images * config.test_snr_db.len());
    let mut aggregates = Vec::new();
    for &snr in &config.test_snr_db {
        let channel = test_channel(snr, meta.normalize_power)?;
        let mut rng = rng_for(config.seed, snr);
        let start = records.len();
        for (batch, out) in batches.iter().zip(&encoded) {
            let rx = receive(out, &channel, config, &mut rng)?;
            let draws = if rx.variance.is_some() { config.resample_count } else { 1 };
            let mut psnrs = vec![Vec::with_capacity(draws); batch.len()];
            let mut ssims = vec![Vec::with_capacity(draws); batch.len()];
            for _ in 0..draws {
                let y = match &rx.variance {
                    Some(v) => {
                        let eps = standard_normal(v.len(), &mut rng);
                        let y = reparameterize_with(rx.center.data(), v.data(), &eps)?;
                        Tensor::from_vec(rx.center.shape(), y)?
                    }
                    None => rx.center.clone(),
                };
                let decoded = ImageBatch::from_normalized(&net.decoder.decode(y)?);
                for (j, &i) in batch.iter().enumerate() {
                    let reference = test.image(i);
                    psnrs[j].push(psnr(reference, decoded.image(j), config.ssim.dynamic_range)?);
                    ssims[j].push(ssim(reference, decoded.image(j), [h, w, c], &config.ssim)?);
                }
            }
            for (j, &i) in batch.iter().enumerate() {
                records.push(ImageRecord {
                    image_index: i,
                    path: test.paths()[i].clone(),
                    label: test.labels()[i].clone(),
                    test_snr_db: snr,
                    psnr: aggregate_resamples(&psnrs[j])?,
                    ssim: aggregate_resamples(&ssims[j])?,
                });
            }
        }
        aggregates.push(aggregate_records(snr, &records[start..]));
    }

    let checkpoint_fingerprint = checkpoint.fingerprint()?;
    Ok(EvalResult {
        provenance: Provenance {
            method: meta.method,
            train_snr_db: meta.snr_db,
            cmc: meta.cmc,
            checkpoint_fingerprint,
            config_fingerprint: meta.config_fingerprint.clone(),
            dataset_fingerprint: meta.dataset_fingerprint.clone(),
            eval_fingerprint: config.fingerprint(),
            experiment_fingerprint: None,
            code_version: code_version().to_string(),
        },
        config: config.clone(),
        records,
        aggregates,
    })
}

fn aggregate_records(snr: f64, records: &[ImageRecord]) -> SnrAggregate {
    let n = records.len() as f64;
    let mean_of = |f: &dyn Fn(&ImageRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    SnrAggregate {
        test_snr_db: snr,
        images: records.len(),
        psnr: Spread {
            mean: mean_of(&|r| r.psnr.mean),
            min: mean_of(&|r| r.psnr.min),
            max: mean_of(&|r| r.psnr.max),
        },
        ssim: Spread {
            mean: mean_of(&|r| r.ssim.mean),
            min: mean_of(&|r| r.ssim.min),
            max: mean_of(&|r| r.ssim.max),
        },
    }
}

/// Columns of the per-image results table.
pub const RECORD_COLUMNS: &[&str] = &[
    "method",
    "train_snr_db",
    "cmc",
    "mode",
    "test_snr_db",
    "image_index",
    "path",
    "label",
    "psnr_mean",
    "psnr_min",
    "psnr_max",
    "ssim_mean",
    "ssim_min",
    "ssim_max",
    "checkpoint_fingerprint",
    "config_fingerprint",
    "eval_fingerprint",
    "experiment_fingerprint",
    "code_version",
];

/// Columns of the summary table.
pub const SUMMARY_COLUMNS: &[&str] = &[
    "method",
    "train_snr_db",
    "cmc",
    "mode",
    "test_snr_db",
    "images",
    "psnr_mean",
    "psnr_min",
    "psnr_max",
    "ssim_mean",
    "ssim_min",
    "ssim_max",
    "checkpoint_fingerprint",
    "config_fingerprint",
    "eval_fingerprint",
    "experiment_fingerprint",
    "code_version",
];

/// Formats floats so that they parse back exactly, with `inf` for infinities.
pub fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v}")
    }
}

impl EvalResult {
    fn prefix(&self) -> Vec<String> {
        let p = &self.provenance;
        vec![
            p.method.to_string(),
            fmt_float(p.train_snr_db),
            fmt_float(p.cmc),
            self.config.mode.to_string(),
        ]
    }

    fn suffix(&self) -> Vec<String> {
        let p = &self.provenance;
        vec![
            p.checkpoint_fingerprint.clone(),
            p.config_fingerprint.clone(),
            p.eval_fingerprint.clone(),
            p.experiment_fingerprint.clone().unwrap_or_default(),
            p.code_version.clone(),
        ]
    }

    pub fn records_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(RECORD_COLUMNS).map_err(csv_err)?;
        for r in &self.records {
            let mut row = self.prefix();
            row.extend([
                fmt_float(r.test_snr_db),
                r.image_index.to_string(),
                r.path.display().to_string(),
                r.label.clone(),
            ]);
            row.extend(spread_cells(&r.psnr));
            row.extend(spread_cells(&r.ssim));
            row.extend(self.suffix());
            w.write_record(&row).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))
    }

    pub fn summary_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(SUMMARY_COLUMNS).map_err(csv_err)?;
        for a in &self.aggregates {
            let mut row = self.prefix();
            row.extend([fmt_float(a.test_snr_db), a.images.to_string()]);
            row.extend(spread_cells(&a.psnr));
            row.extend(spread_cells(&a.ssim));
            row.extend(self.suffix());
            w.write_record(&row).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))
    }

    /// Writes `<stem>.json`, `<stem>.csv` and `<stem>.summary.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        let files = [
            (dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(self)?),
            (dir.join(format!("{stem}.csv")), self.records_csv()?),
            (dir.join(format!("{stem}.summary.csv")), self.summary_csv()?),
        ];
        let mut out = Vec::new();
        for (path, bytes) in files {
            write_atomic(&path, &bytes)?;
            out.push(path);
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn aggregate_at(&self, snr_db: f64) -> Option<&SnrAggregate> {
        self.aggregates.iter().find(|a| a.test_snr_db == snr_db)
    }
}

fn spread_cells(s: &Spread) -> [String; 3] {
    [fmt_float(s.mean), fmt_float(s.min), fmt_float(s.max)]
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

/// Parses `start:stop:step` into an inclusive list.
pub fn parse_snr_range(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [a, b, s] = parts[..] else {
        return Err(invalid(format!("expected start:stop:step, got {spec:?}")));
    };
    let num = |t: &str| -> Result<f64> {
        t.trim()
            .parse::<f64>()
            .map_err(|_| invalid(format!("{t:?} is not a number in SNR range {spec:?}")))
    };
    let (a, b, s) = (num(a)?, num(b)?, num(s)?);
    if !(s > 0.0 && a.is_finite() && b.is_finite() && b >= a) {
        return Err(invalid(format!("SNR range {spec:?} needs start <= stop and a positive step")));
    }
    let n = ((b - a) / s + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| a + i as f64 * s).collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    use super::*;

    fn naive_psnr(a: &[u8], b: &[u8], l: f64) -> f64 {
        let mut mse = 0.0;
        for i in 0..a.len() {
            let d = a[i] as f64 - b[i] as f64;
            mse += d * d;
        }
        mse /= a.len() as f64;
        if mse == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (l * l / mse).log10()
        }
    }

    /// Per-window reference: full 2-D window weights, direct moments.
    fn naive_ssim(a: &[u8], b: &[u8], [h, w, c]: [usize; 3], cfg: &SsimConfig) -> f64 {
        let k = cfg.window_size;
        let half = (k as f64 - 1.0) / 2.0;
        let mut win = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let (di, dj) = (i as f64 - half, j as f64 - half);
                win[i * k + j] = (-(di * di + dj * dj) / (2.0 * cfg.gaussian_sigma.powi(2))).exp();
            }
        }
        let z: f64 = win.iter().sum();
        win.iter_mut().for_each(|v| *v /= z);
        let mut acc = 0.0;
        let mut count = 0;
        for ch in 0..c {
            for y0 in 0..=h - k {
                for x0 in 0..=w - k {
                    let (mut mx, mut my) = (0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let p = ((y0 + i) * w + x0 + j) * c + ch;
                            mx += win[i * k + j] * a[p] as f64;
                            my += win[i * k + j] * b[p] as f64;
                        }
                    }
                    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let p = ((y0 + i) * w + x0 + j) * c + ch;
                            let (dx, dy) = (a[p] as f64 - mx, b[p] as f64 - my);
                            vx += win[i * k + j] * dx * dx;
                            vy += win[i * k + j] * dy * dy;
                            cov += win[i * k + j] * dx * dy;
                        }
                    }
                    let l = (2.0 * mx * my + cfg.c1) / (mx * mx + my * my + cfg.c1);
                    let cc = (2.0 * vx.sqrt() * vy.sqrt() + cfg.c2) / (vx + vy + cfg.c2);
                    let s = (cov + cfg.c3) / (vx.sqrt() * vy.sqrt() + cfg.c3);
                    acc += l * cc * s;
                    count += 1;
                }
            }
        }
        acc / count as f64
    }

    fn random_pair(rng: &mut ChaCha8Rng, n: usize) -> (Vec<u8>, Vec<u8>) {
        let a: Vec<u8> = (0..n).map(|_| rng.random()).collect();
        let b: Vec<u8> = a
            .iter()
            .map(|&v| (v as i32 + rng.random_range(-40..=40)).clamp(0, 255) as u8)
            .collect();
        (a, b)
    }

    #[test]
    fn psnr_examples() {
        let x = vec![7u8; 48];
        assert_eq!(psnr(&x, &x, 255.0).unwrap(), f64::INFINITY);
        let a = vec![0u8; 10];
        let b = vec![255u8; 10];
        assert!(psnr(&a, &b, 255.0).unwrap().abs() < 1e-12);
        let c: Vec<u8> = (0..300).map(|i| 100 + (i % 2) as u8 * 32).collect();
        let d = vec![116u8; 300];
        // 10·log10(255²/256)
        assert!((psnr(&c, &d, 255.0).unwrap() - 24.048_403_955_560_6).abs() < 1e-6);
        assert!(psnr(&a, &d, 255.0).is_err());
        assert!(psnr(&a, &a, 0.0).is_err());
    }

    #[test]
    fn psnr_matches_reference_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (a, b) = random_pair(&mut rng, 16 * 16 * 3);
            let fast = psnr(&a, &b, 255.0).unwrap();
            assert!((fast - naive_psnr(&a, &b, 255.0)).abs() <= 1e-6);
        }
    }

    #[test]
    fn ssim_matches_reference_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = SsimConfig::default();
        for _ in 0..20 {
            let (a, b) = random_pair(&mut rng, 16 * 14 * 3);
            let fast = ssim(&a, &b, [16, 14, 3], &cfg).unwrap();
            let slow = naive_ssim(&a, &b, [16, 14, 3], &cfg);
            assert!((fast - slow).abs() <= 1e-4, "{fast} vs {slow}");
        }
    }

    #[test]
    fn ssim_examples() {
        let cfg = SsimConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, _) = random_pair(&mut rng, 12 * 12 * 3);
        assert!((ssim(&a, &a, [12, 12, 3], &cfg).unwrap() - 1.0).abs() < 1e-12);
        let (x, y) = (60.0, 190.0);
        let ca = vec![60u8; 12 * 12];
        let cb = vec![190u8; 12 * 12];
        let expected = (2.0 * x * y + cfg.c1) / (x * x + y * y + cfg.c1);
        assert!((ssim(&ca, &cb, [12, 12, 1], &cfg).unwrap() - expected).abs() < 1e-9);
        assert!(ssim(&a[..10 * 10 * 3], &a[..10 * 10 * 3], [10, 10, 3], &cfg).is_err());
        assert!(ssim(&a, &a[1..], [12, 12, 3], &cfg).is_err());
        assert_eq!(cfg.c3, cfg.c2 / 2.0);
    }

    #[test]
    fn aggregate_examples() {
        let s = aggregate_resamples(&[10.0]).unwrap();
        assert_eq!((s.mean, s.min, s.max), (10.0, 10.0, 10.0));
        let s = aggregate_resamples(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.min, s.max), (2.0, 1.0, 3.0));
        assert!(aggregate_resamples(&[]).is_err());
        let s = aggregate_resamples(&[f64::INFINITY, 3.0]).unwrap();
        assert_eq!((s.mean, s.min), (f64::INFINITY, 3.0));
    }

    proptest! {
        #[test]
        fn aggregate_is_permutation_invariant(
            mut v in prop::collection::vec(-1e3f64..1e3, 1..40),
            seed in any::<u64>(),
        ) {
            let a = aggregate_resamples(&v).unwrap();
            use rand::seq::SliceRandom;
            v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let b = aggregate_resamples(&v).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!(a.min <= a.mean && a.mean <= a.max);
        }

        #[test]
        fn ssim_is_bounded_and_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = random_pair(&mut rng, 11 * 13 * 2);
            let cfg = SsimConfig::default();
            let ab = ssim(&a, &b, [11, 13, 2], &cfg).unwrap();
            let ba = ssim(&b, &a, [11, 13, 2], &cfg).unwrap();
            prop_assert!((-1.0..=1.0).contains(&ab));
            prop_assert!((ab - ba).abs() < 1e-12);
        }
    }

    #[test]
    fn rectifier_is_positive_and_near_identity_for_large_values() {
        for v in [-5.0, -0.1, 0.0, 0.05, 1.0, 3.0] {
            assert!(rectify_variance(v, 1.0) > 0.0);
        }
        assert!((rectify_variance(3.0, 1.0) - 3.0).abs() < 1e-9);
        assert!((rectify_variance(0.0, 1.0) - 2f64.ln() / 10.0).abs() < 1e-12);
    }

    #[test]
    fn received_variance_includes_channel_noise() {
        let mean = Tensor::from_vec([1, 1, 2, 2], vec![1.0f32, -2.0, 0.5, 3.0]).unwrap();
        let lv = Tensor::from_vec([1, 1, 2, 2], vec![0.0f32, -1.0, 0.5, -2.0]).unwrap();
        let out = EncoderOutput::Stats(crate::coding::LatentStats::new(mean.clone(), lv.clone()).unwrap());
        let channel = ChannelConfig::new(5.0, true).unwrap();
        let mut cfg = EvalConfig::new(EvalMode::TransmissionVariance, vec![5.0], 1, 0);
        cfg.noiseless_variance_link = true;
        cfg.omit_channel_variance = true;

        let sent: Vec<f64> = lv.data().iter().map(|&l| (l as f64).exp()).collect();
        let scale = (sent.iter().map(|v| v * v).sum::<f64>() / 4.0).sqrt();
        let rx = receive(&out, &channel, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let plain = rx.variance.unwrap();
        for (&got, &v) in plain.data().iter().zip(&sent) {
            assert!((got as f64 - rectify_variance(v, scale)).abs() < 1e-5);
        }

        cfg.omit_channel_variance = false;
        let rx = receive(&out, &channel, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let s_mean = crate::channel::rms(mean.data()) as f64;
        let extra = s_mean * s_mean * channel.noise_variance();
        for (&with, &without) in rx.variance.unwrap().data().iter().zip(plain.data()) {
            assert!((with as f64 - without as f64 - extra).abs() < 1e-4);
        }
    }

    #[test]
    fn snr_range_parsing() {
        assert_eq!(
            parse_snr_range("-10:25:5").unwrap(),
            vec![-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0]
        );
        assert_eq!(parse_snr_range("0:1:0.5").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_snr_range("5:0:1").is_err());
        assert!(parse_snr_range("0:5").is_err());
        assert!(parse_snr_range("0:5:0").is_err());
    }

    #[test]
    fn mode_parsing_and_compatibility() {
        assert_eq!("fixed".parse::<EvalMode>().unwrap(), EvalMode::FixedVariance);
        assert!("bogus".parse::<EvalMode>().is_err());
        assert!(EvalMode::AeDirect.compatible_with(Method::Ae));
        assert!(!EvalMode::AeDirect.compatible_with(Method::Vscc));
        assert!(!EvalMode::FixedVariance.compatible_with(Method::Ae));
        let cfg = EvalConfig::new(EvalMode::FixedVariance, vec![5.0], 2, 0);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    mod end_to_end {
        use super::*;
        use crate::datapipe::{build_knowledge_base, DatasetSplit};
        use crate::network::ArchitectureConfig;
        use crate::trainer::{train, TrainConfig};

        fn data() -> DatasetSplit {
            let mut r = ChaCha8Rng::seed_from_u64(11);
            let mut train = ImageSet::new(12);
            let mut test = ImageSet::new(12);
            for i in 0..6 {
                let px: Vec<u8> = (0..12 * 12 * 3).map(|_| r.random_range(60..200)).collect();
                train.push(&px, "a", PathBuf::from(format!("a{i}"))).unwrap();
                test.push(&px, "b", PathBuf::from(format!("b{i}"))).unwrap();
            }
            DatasetSplit::from_sets(train, test).unwrap()
        }

        fn trained(method: Method) -> Checkpoint {
            let cfg = TrainConfig {
                method,
                epochs: 1,
                batch_size: 3,
                learning_rate: 1e-3,
                architecture: ArchitectureConfig {
                    image_size: 12,
                    stage_widths: vec![8],
                    latent_channels: 2,
                    groupnorm_group_size: 4,
                    attention_enabled: false,
                    emit_variance: method.is_variational(),
                    ..ArchitectureConfig::default()
                },
                ..TrainConfig::default()
            };
            train(&cfg, &data()).unwrap()
        }

        #[test]
        fn direct_decoding_has_no_spread_and_modes_are_checked() {
            let d = data();
            let ae = trained(Method::Ae);
            let cfg = EvalConfig::new(EvalMode::AeDirect, vec![5.0, f64::INFINITY], 4, 1);
            let res = evaluate(&ae, &d.test, &cfg).unwrap();
            assert_eq!(res.records.len(), 12);
            for r in &res.records {
                assert_eq!(r.psnr.min, r.psnr.max);
                assert_eq!(r.ssim.min, r.ssim.max);
                assert!(r.psnr.mean.is_finite());
            }
            let fixed = EvalConfig::new(EvalMode::TransmissionVariance, vec![5.0], 2, 1);
            assert!(matches!(evaluate(&ae, &d.test, &fixed), Err(Error::Config(_))));
            let vscc = trained(Method::Vscc);
            assert!(matches!(evaluate(&vscc, &d.test, &cfg), Err(Error::Config(_))));
        }

        #[test]
        fn resampling_modes_are_seeded_and_well_formed() {
            let d = data();
            let ckpt = trained(Method::Vscc);
            let net: Network<f32> = ckpt.build_network().unwrap();
            let kb = build_knowledge_base(&net.encoder, &d.train, 4, "m").unwrap();
            for mode in [EvalMode::TransmissionVariance, EvalMode::FixedVariance] {
                let mut cfg = EvalConfig::new(mode, vec![-10.0, 5.0, f64::INFINITY], 3, 9);
                cfg.knowledge_base = Some(kb.clone());
                let a = evaluate(&ckpt, &d.test, &cfg).unwrap();
                let b = evaluate(&ckpt, &d.test, &cfg).unwrap();
                assert_eq!(a, b);
                assert_eq!(a.aggregates.len(), 3);
                for r in &a.records {
                    assert!(r.psnr.min <= r.psnr.mean && r.psnr.mean <= r.psnr.max);
                    assert!(r.ssim.min <= r.ssim.mean && r.ssim.mean <= r.ssim.max);
                }
                let agg = &a.aggregates[1];
                let per: Vec<f64> = a.records.iter().filter(|r| r.test_snr_db == 5.0).map(|r| r.psnr.mean).collect();
                assert!((agg.psnr.mean - per.iter().sum::<f64>() / per.len() as f64).abs() < 1e-12);

                let dir = tempfile::tempdir().unwrap();
                let files = a.write(dir.path(), "run").unwrap();
                assert_eq!(EvalResult::load(&files[0]).unwrap().records, a.records);
                let csv = String::from_utf8(std::fs::read(&files[1]).unwrap()).unwrap();
                assert_eq!(csv.lines().count(), 1 + a.records.len());
                assert!(csv.lines().next().unwrap().starts_with("method,train_snr_db"));
            }
            let mut cfg = EvalConfig::new(EvalMode::FixedVariance, vec![5.0], 1, 0);
            let mut wrong = kb.clone();
            wrong.shape = [1, 1, 1];
            wrong.per_element_variance = vec![1.0];
            cfg.knowledge_base = Some(wrong);
            assert!(matches!(evaluate(&ckpt, &d.test, &cfg), Err(Error::Config(_))));
        }
    }
}
