//! End-to-end training through the channel, and the sweep driver.
//!
//! Three independent random streams derive from the seed: parameter
//! initialization, data order, and channel/sampling noise. Methods that
//! share a seed therefore see the same data order, and the variational
//! methods also start from identical weights.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::{transmit, transmit_backward, ChannelConfig, Transmission};
use crate::coding::{
    loss_and_grad, reparameterize_backward, reparameterize_with, LossBreakdown, LossConfig, Method,
};
use crate::datapipe::DatasetSplit;
use crate::error::{invalid, Error, Result};
use crate::fingerprint::{code_version, sha256_hex};
use crate::network::checkpoint::{load_checkpoint, save_checkpoint, write_atomic, Checkpoint, TrainingMetadata};
use crate::network::optim::{Adam, AdamConfig};
use crate::network::{ArchitectureConfig, EncoderOutput, Network};
use crate::serde_ext;
use crate::tensor::{Scalar, Tensor};

/// Consecutive non-finite losses tolerated before training aborts.
pub const DIVERGENCE_PATIENCE: usize = 10;

const INIT_STREAM: u64 = 0;
const ORDER_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    /// `inf` trains without channel noise.
    #[serde(with = "serde_ext::float")]
    pub train_snr_db: f64,
    /// Channel matching coefficient; only read by VSCC.
    pub cmc: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Weight of the reconstruction term relative to the channel-matching term.
    pub reconstruction_weight: f64,
    /// Normalize each latent block to unit power before the channel.
    pub normalize_power: bool,
    /// `emit_variance` is taken from `method`.
    pub architecture: ArchitectureConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
    /// Steps between progress lines; 0 logs epochs only.
    #[serde(default)]
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Vscc,
            train_snr_db: 5.0,
            cmc: 5.0,
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-4,
            seed: 0,
            reconstruction_weight: 100.0,
            normalize_power: true,
            architecture: ArchitectureConfig::default(),
            checkpoint_dir: None,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    /// 32x32 preset sized for a single CPU core.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            architecture: ArchitectureConfig::desk(),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.train_snr_db.is_nan() || self.train_snr_db == f64::NEG_INFINITY {
            return Err(Error::Config(format!("invalid train_snr_db {}", self.train_snr_db)));
        }
        self.loss_config().validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Same run with irrelevant fields cleared: no CMC outside VSCC, and no
    /// output location or logging cadence.
    pub fn canonical(&self) -> TrainConfig {
        let mut c = self.clone();
        if c.method != Method::Vscc {
            c.cmc = 0.0;
        }
        c.architecture.emit_variance = c.method.is_variational();
        c.checkpoint_dir = None;
        c.log_every = 0;
        c
    }

    /// Hash of the canonical config and the code version.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(&self.canonical()).expect("config serializes");
        let mut bytes = code_version().as_bytes().to_vec();
        bytes.push(0);
        bytes.extend_from_slice(&json);
        sha256_hex(&bytes)
    }

    pub fn channel(&self) -> Result<ChannelConfig> {
        if self.train_snr_db == f64::INFINITY {
            Ok(ChannelConfig::noiseless())
        } else {
            ChannelConfig::new(self.train_snr_db, self.normalize_power)
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        let noise_variance = if self.train_snr_db == f64::INFINITY {
            0.0
        } else {
            10f64.powf(-self.train_snr_db / 10.0)
        };
        LossConfig {
            method: self.method,
            cmc: if self.method == Method::Vscc { self.cmc } else { 1.0 },
            reconstruction_weight: self.reconstruction_weight,
            noise_variance,
        }
    }

    /// File stem identifying the grid cell.
    pub fn cell_id(&self) -> String {
        let snr = if self.train_snr_db.is_finite() {
            format!("{}", self.train_snr_db)
        } else {
            "inf".into()
        };
        match self.method {
            Method::Vscc => format!("vscc_snr{snr}_cmc{}", self.cmc),
            m => format!("{m}_snr{snr}"),
        }
    }

    pub fn checkpoint_path(&self) -> Option<PathBuf> {
        self.checkpoint_dir
            .as_ref()
            .map(|d| d.join(format!("{}.ckpt", self.cell_id())))
    }
}

/// Per-epoch averages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub loss: LossBreakdown,
    /// Smallest per-step channel-matching term seen in the epoch.
    #[serde(with = "serde_ext::float")]
    pub min_channel_matching_term: f64,
    pub skipped_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngStreams {
    pub order: ChaCha8Rng,
    pub noise: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub running_loss: LossBreakdown,
    #[serde(with = "serde_ext::float")]
    pub best_metric: f64,
    pub rng_state: RngStreams,
    #[serde(default)]
    pub history: Vec<EpochLog>,
}

impl TrainState {
    fn fresh(seed: u64) -> Self {
        TrainState {
            epoch: 0,
            step: 0,
            running_loss: LossBreakdown::default(),
            best_metric: f64::INFINITY,
            rng_state: RngStreams {
                order: stream(seed, ORDER_STREAM),
                noise: stream(seed, NOISE_STREAM),
            },
            history: Vec::new(),
        }
    }
}

/// Fresh network for `config`; depends only on the seed and architecture.
pub fn init_network(config: &TrainConfig) -> Result<Network<f32>> {
    let mut arch = config.architecture.clone();
    arch.emit_variance = config.method.is_variational();
    Network::new(&arch, &mut stream(config.seed, INIT_STREAM))
}

/// Sends each sample's latent map through the channel independently.
pub fn transmit_batch<T: Scalar, R: Rng + ?Sized>(
    latent: &Tensor<T>,
    channel: &ChannelConfig,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<Transmission<T>>)> {
    let mut out = Tensor::zeros(latent.shape());
    let mut txs = Vec::with_capacity(latent.batch());
    for b in 0..latent.batch() {
        let tx = transmit(latent.sample(b), channel, rng)?;
        out.sample_mut(b).copy_from_slice(&tx.received);
        txs.push(tx);
    }
    Ok((out, txs))
}

pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<T> {
    (0..n).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect()
}

/// One forward/backward pass. Gradients are accumulated into `net` only
/// when the loss is finite.
pub fn train_step<T: Scalar, R: Rng + ?Sized>(
    net: &mut Network<T>,
    x: Tensor<T>,
    channel: &ChannelConfig,
    loss_cfg: &LossConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let (out, enc_cache) = net.encoder.forward(x.clone())?;
    let mean = out.mean().clone();
    let (z, txs) = transmit_batch(&mean, channel, rng)?;

    let sampled = match &out {
        EncoderOutput::Stats(stats) => {
            let var = stats.variance();
            let eps = standard_normal(var.len(), rng);
            let y = reparameterize_with(z.data(), var.data(), &eps)?;
            Some((Tensor::from_vec(z.shape(), y)?, var, eps))
        }
        EncoderOutput::Latent(_) => None,
    };
    let decoder_input = match &sampled {
        Some((y, _, _)) => y.clone(),
        None => z,
    };
    let (xhat, dec_cache) = net.decoder.forward(decoder_input)?;
    let (loss, grads) = loss_and_grad(&x, &xhat, out.stats(), loss_cfg, true)?;
    if !loss.is_finite() {
        return Ok(loss);
    }
    let grads = grads.expect("gradients requested");
    let g_received = net.decoder.backward(dec_cache, grads.reconstructed);

    let (g_channel_out, g_log_variance) = match sampled {
        Some((_, var, eps)) => {
            let (gz, gvar) = reparameterize_backward(var.data(), &eps, g_received.data());
            let mut glv = grads.log_variance.expect("variational gradients");
            for ((g, dv), v) in glv.data_mut().iter_mut().zip(&gvar).zip(var.data()) {
                *g += *dv * *v;
            }
            (Tensor::from_vec(mean.shape(), gz)?, Some(glv))
        }
        None => (g_received, None),
    };
    let mut g_mean = Tensor::zeros(mean.shape());
    for (b, tx) in txs.iter().enumerate() {
        let g = transmit_backward(mean.sample(b), tx, channel.normalize_power(), g_channel_out.sample(b));
        g_mean.sample_mut(b).copy_from_slice(&g);
    }
    if let Some(gm) = grads.mean {
        g_mean.add_assign(&gm)?;
    }
    net.encoder.backward(enc_cache, g_mean, g_log_variance);
    Ok(loss)
}

fn metadata(config: &TrainConfig, data: &DatasetSplit, epoch: usize) -> TrainingMetadata {
    TrainingMetadata {
        method: config.method,
        snr_db: config.train_snr_db,
        cmc: config.canonical().cmc,
        reconstruction_weight: config.reconstruction_weight,
        normalize_power: config.normalize_power,
        epoch,
        seed: config.seed,
        dataset_fingerprint: data.fingerprint.clone(),
        config_fingerprint: config.fingerprint(),
        code_version: code_version().to_string(),
    }
}

fn snapshot(
    config: &TrainConfig,
    data: &DatasetSplit,
    net: &Network<f32>,
    adam: &Adam<f32>,
    state: &TrainState,
) -> Checkpoint {
    Checkpoint::new(net, metadata(config, data, state.epoch))
        .with_optimizer(net, adam)
        .with_train_state(state.clone())
}

/// Trains from scratch.
pub fn train(config: &TrainConfig, data: &DatasetSplit) -> Result<Checkpoint> {
    run(config, data, None)
}

/// Continues a run from a checkpoint written by an earlier call with the
/// same config; the remaining epochs reproduce an uninterrupted run.
pub fn resume(config: &TrainConfig, data: &DatasetSplit, from: &Checkpoint) -> Result<Checkpoint> {
    if from.metadata.config_fingerprint != config.fingerprint() {
        return Err(Error::Config("checkpoint was produced by a different training config".into()));
    }
    if from.metadata.dataset_fingerprint != data.fingerprint {
        return Err(Error::Config("checkpoint was trained on a different dataset".into()));
    }
    if from.train_state.is_none() {
        return Err(Error::Config("checkpoint carries no resume state".into()));
    }
    run(config, data, Some(from))
}

fn run(config: &TrainConfig, data: &DatasetSplit, from: Option<&Checkpoint>) -> Result<Checkpoint> {
    config.validate()?;
    let arch = &config.architecture;
    if data.train.size() != arch.image_size {
        return Err(Error::Config(format!(
            "dataset images are {0}x{0} but the architecture expects {1}x{1}",
            data.train.size(),
            arch.image_size
        )));
    }
    if data.train.is_empty() {
        return Err(invalid("training split is empty"));
    }
    let channel = config.channel()?;
    let loss_cfg = config.loss_config();
    let mut net = init_network(config)?;
    let mut adam = Adam::new(AdamConfig::with_learning_rate(config.learning_rate));
    let mut state = TrainState::fresh(config.seed);
    if let Some(ckpt) = from {
        ckpt.load_into(&mut net)?;
        ckpt.restore_optimizer(&net, &mut adam)?;
        state = ckpt.train_state.clone().expect("checked by caller");
    }
    let ckpt_path = config.checkpoint_path();
    let mut indices: Vec<usize> = (0..data.train.len()).collect();
    let mut consecutive_bad = 0usize;

    while state.epoch < config.epochs {
        let epoch = state.epoch + 1;
        indices.sort_unstable();
        indices.shuffle(&mut state.rng_state.order);
        let mut sum = LossBreakdown::default();
        let mut counted = 0usize;
        let mut skipped = 0usize;
        let mut min_cm = f64::INFINITY;
        for batch in indices.chunks(config.batch_size) {
            let x = data.train.batch(batch)?.normalized::<f32>();
            net.zero_grad();
            let loss = train_step(&mut net, x, &channel, &loss_cfg, &mut state.rng_state.noise)?;
            state.step += 1;
            if !loss.is_finite() {
                skipped += 1;
                consecutive_bad += 1;
                if consecutive_bad >= DIVERGENCE_PATIENCE {
                    return Err(diverged(config, data, &net, &adam, &state, epoch, loss));
                }
                continue;
            }
            consecutive_bad = 0;
            adam.step(|f| net.visit_mut(f));
            let w = batch.len() as f64;
            sum.total += loss.total * w;
            sum.channel_matching_term += loss.channel_matching_term * w;
            sum.reconstruction_term += loss.reconstruction_term * w;
            counted += batch.len();
            min_cm = min_cm.min(loss.channel_matching_term);
            if config.log_every > 0 && state.step % config.log_every as u64 == 0 {
                log::info!(
                    "step={} epoch={epoch} total={:.6} channel_matching_term={:.6} reconstruction_term={:.6}",
                    state.step,
                    loss.total,
                    loss.channel_matching_term,
                    loss.reconstruction_term
                );
            }
        }
        // An epoch without a single finite step reports NaN.
        let n = if counted == 0 { f64::NAN } else { counted as f64 };
        let avg = LossBreakdown {
            total: sum.total / n,
            channel_matching_term: sum.channel_matching_term / n,
            reconstruction_term: sum.reconstruction_term / n,
        };
        log::info!(
            "epoch={epoch} step={} total={:.6} channel_matching_term={:.6} reconstruction_term={:.6} cell={}",
            state.step,
            avg.total,
            avg.channel_matching_term,
            avg.reconstruction_term,
            config.cell_id()
        );
        state.epoch = epoch;
        state.running_loss = avg;
        state.best_metric = state.best_metric.min(avg.total);
        state.history.push(EpochLog {
            epoch,
            step: state.step,
            loss: avg,
            min_channel_matching_term: min_cm,
            skipped_steps: skipped,
        });
        if let Some(path) = &ckpt_path {
            save_checkpoint(&snapshot(config, data, &net, &adam, &state), path)?;
        }
    }
    Ok(snapshot(config, data, &net, &adam, &state))
}

fn diverged(
    config: &TrainConfig,
    data: &DatasetSplit,
    net: &Network<f32>,
    adam: &Adam<f32>,
    state: &TrainState,
    epoch: usize,
    loss: LossBreakdown,
) -> Error {
    let mut detail = format!(
        "{DIVERGENCE_PATIENCE} consecutive non-finite losses (last: total={}, channel_matching_term={}, reconstruction_term={})",
        loss.total, loss.channel_matching_term, loss.reconstruction_term
    );
    if let Some(dir) = &config.checkpoint_dir {
        let path = dir.join(format!("{}.diverged.ckpt", config.cell_id()));
        match save_checkpoint(&snapshot(config, data, net, adam, state), &path) {
            Ok(()) => detail.push_str(&format!("; snapshot written to {}", path.display())),
            Err(e) => detail.push_str(&format!("; snapshot failed: {e}")),
        }
    }
    Error::Diverged {
        epoch,
        step: state.step as usize,
        detail,
    }
}

/// One grid point. `cmc` is only meaningful for VSCC.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub method: Method,
    #[serde(with = "serde_ext::float")]
    pub snr_db: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cmc: Option<f64>,
}

/// VSCC cells span SNR x CMC; VAE and AE cells span SNR only.
pub fn expand_grid(methods: &[Method], snrs: &[f64], cmcs: &[f64]) -> Vec<SweepCell> {
    let mut cells = Vec::new();
    for &method in methods {
        for &snr_db in snrs {
            if method == Method::Vscc {
                cells.extend(cmcs.iter().map(|&c| SweepCell {
                    method,
                    snr_db,
                    cmc: Some(c),
                }));
            } else {
                cells.push(SweepCell {
                    method,
                    snr_db,
                    cmc: None,
                });
            }
        }
    }
    cells
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Trained,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub cell: SweepCell,
    pub status: CellStatus,
    pub checkpoint: PathBuf,
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepManifest {
    pub code_version: String,
    pub records: Vec<ManifestRecord>,
}

impl SweepManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn completed(&self) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(|r| r.status != CellStatus::Failed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FailurePolicy {
    /// Record the failure and move on to the next cell.
    #[default]
    Continue,
    FailFast,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Config for one cell of a sweep.
pub fn cell_config(base: &TrainConfig, cell: &SweepCell, out_dir: &Path) -> TrainConfig {
    let mut c = base.clone();
    c.method = cell.method;
    c.train_snr_db = cell.snr_db;
    match (cell.method, cell.cmc) {
        (Method::Vscc, Some(cmc)) => c.cmc = cmc,
        (Method::Vscc, None) => {}
        (m, Some(_)) => log::warn!("{m} has no channel matching coefficient; cmc ignored"),
        (_, None) => {}
    }
    c.architecture.emit_variance = cell.method.is_variational();
    c.checkpoint_dir = Some(out_dir.to_path_buf());
    c
}

/// Trains every cell, skipping cells whose finished checkpoint already
/// matches the config and dataset fingerprints. The manifest is rewritten
/// after every cell.
pub fn sweep(
    cells: &[SweepCell],
    base: &TrainConfig,
    data: &DatasetSplit,
    out_dir: &Path,
    policy: FailurePolicy,
) -> Result<SweepManifest> {
    if cells.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let previous = if manifest_path.exists() {
        Some(SweepManifest::load(&manifest_path)?)
    } else {
        None
    };
    // Records of cells outside this grid are carried over untouched.
    let paths: Vec<PathBuf> = cells
        .iter()
        .filter_map(|c| {
            let quiet = SweepCell {
                cmc: c.cmc.filter(|_| c.method == Method::Vscc),
                ..*c
            };
            cell_config(base, &quiet, out_dir).checkpoint_path()
        })
        .collect();
    let mut manifest = SweepManifest {
        code_version: code_version().to_string(),
        records: previous
            .iter()
            .flat_map(|m| m.records.iter())
            .filter(|r| !paths.contains(&r.checkpoint))
            .cloned()
            .collect(),
    };
    for cell in cells {
        let cfg = cell_config(base, cell, out_dir);
        let path = cfg.checkpoint_path().expect("checkpoint_dir set");
        let fp = cfg.fingerprint();
        let record = |status, checkpoint_fingerprint, error| ManifestRecord {
            cell: *cell,
            status,
            checkpoint: path.clone(),
            config_fingerprint: fp.clone(),
            dataset_fingerprint: data.fingerprint.clone(),
            checkpoint_fingerprint,
            error,
        };
        if let Some(done) = finished_fingerprint(previous.as_ref(), &cfg, data, &path) {
            log::info!("skipping completed cell {}", cfg.cell_id());
            manifest.records.push(record(CellStatus::Skipped, Some(done), None));
            continue;
        }
        let outcome = match existing_partial(&cfg, data, &path) {
            Some(partial) => resume(&cfg, data, &partial),
            None => train(&cfg, data),
        };
        let result = outcome.and_then(|ckpt| {
            save_checkpoint(&ckpt, &path)?;
            ckpt.fingerprint()
        });
        match result {
            Ok(f) => manifest.records.push(record(CellStatus::Trained, Some(f), None)),
            Err(e) => {
                log::error!("cell {} failed: {e}", cfg.cell_id());
                manifest.records.push(record(CellStatus::Failed, None, Some(e.to_string())));
                if policy == FailurePolicy::FailFast {
                    manifest.save(&manifest_path)?;
                    return Err(e);
                }
            }
        }
        manifest.save(&manifest_path)?;
    }
    manifest.save(&manifest_path)?;
    Ok(manifest)
}

fn finished_fingerprint(
    previous: Option<&SweepManifest>,
    cfg: &TrainConfig,
    data: &DatasetSplit,
    path: &Path,
) -> Option<String> {
    let fp = cfg.fingerprint();
    let rec = previous?.completed().find(|r| {
        r.config_fingerprint == fp && r.dataset_fingerprint == data.fingerprint && r.checkpoint == path
    })?;
    let ckpt = load_checkpoint(path).ok()?;
    let actual = ckpt.fingerprint().ok()?;
    (Some(&actual) == rec.checkpoint_fingerprint.as_ref() && ckpt.metadata.epoch == cfg.epochs).then_some(actual)
}

fn existing_partial(cfg: &TrainConfig, data: &DatasetSplit, path: &Path) -> Option<Checkpoint> {
    let ckpt = load_checkpoint(path).ok()?;
    let usable = ckpt.metadata.config_fingerprint == cfg.fingerprint()
        && ckpt.metadata.dataset_fingerprint == data.fingerprint
        && ckpt.train_state.is_some();
    usable.then_some(ckpt)
}
