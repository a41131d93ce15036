//! Experiment configuration file (TOML).
//!
//! One file pins the dataset, architecture, training defaults, evaluation
//! defaults and sweep grid. Any scalar can be overridden from the command
//! line with `--set section.key=value`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use vscc::coding::Method;
use vscc::datapipe::SplitSpec;
use vscc::evaluator::{parse_snr_range, EvalConfig, EvalMode, SsimConfig};
use vscc::fingerprint::{code_version, sha256_hex};
use vscc::network::ArchitectureConfig;
use vscc::serde_ext;
use vscc::trainer::{expand_grid, SweepCell, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds training, the class split and evaluation.
    pub seed: u64,
    /// Relative paths resolve against the config file's directory.
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub architecture: ArchitectureConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Class-folder directory or tab-separated manifest.
    pub source: PathBuf,
    pub crop_size: usize,
    #[serde(default = "default_fraction")]
    pub test_class_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_classes: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_images_per_class: Option<usize>,
    #[serde(default)]
    pub on_bad_file: vscc::datapipe::BadFilePolicy,
    /// Parameters for `gen-corpus` when the source is generated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSection>,
}

fn default_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub classes: usize,
    pub per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub method: Method,
    #[serde(with = "serde_ext::float")]
    pub snr_db: f64,
    pub cmc: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub reconstruction_weight: f64,
    #[serde(default = "yes")]
    pub normalize_power: bool,
    #[serde(default)]
    pub log_every: usize,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Modes tried for each checkpoint; incompatible ones are skipped.
    pub modes: Vec<EvalMode>,
    /// `start:stop:step`, inclusive.
    pub snr_range: String,
    /// Extra test SNRs appended to the range (`inf` for noiseless).
    #[serde(default, with = "serde_ext::float_vec")]
    pub extra_snr_db: Vec<f64>,
    pub resample_count: usize,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub noiseless_variance_link: bool,
    #[serde(default)]
    pub omit_channel_variance: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_images: Option<usize>,
    #[serde(default)]
    pub ssim: SsimConfig,
}

fn default_eval_batch() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub methods: Vec<Method>,
    #[serde(with = "serde_ext::float_vec")]
    pub snr_db: Vec<f64>,
    pub cmc: Vec<f64>,
    #[serde(default)]
    pub fail_fast: bool,
}

impl ExperimentConfig {
    /// Parses a config file, applies `key=value` overrides and resolves
    /// relative paths against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = Self::parse(&text, overrides)
            .with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.output_dir = base.join(&cfg.output_dir);
        cfg.dataset.source = base.join(&cfg.dataset.source);
        Ok(cfg)
    }

    pub fn parse(text: &str, overrides: &[String]) -> anyhow::Result<Self> {
        let mut value: toml::Table = toml::from_str(text)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(value).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.train_config().validate().context("train")?;
        if self.dataset.crop_size != self.architecture.image_size {
            bail!(
                "dataset.crop_size ({}) must equal architecture.image_size ({})",
                self.dataset.crop_size,
                self.architecture.image_size
            );
        }
        self.test_snrs().context("eval.snr_range")?;
        if self.eval.modes.is_empty() {
            bail!("eval.modes must list at least one mode");
        }
        EvalConfig {
            knowledge_base: None,
            ..self.eval_config(EvalMode::AeDirect)?
        }
        .validate()
        .context("eval")?;
        if self.sweep.methods.is_empty() || self.sweep.snr_db.is_empty() {
            bail!("sweep.methods and sweep.snr_db must be non-empty");
        }
        if self.sweep.methods.contains(&Method::Vscc) && self.sweep.cmc.is_empty() {
            bail!("sweep.cmc must be non-empty when the grid includes vscc");
        }
        Ok(())
    }

    /// Hash of the canonical serialization and the code version; every
    /// artifact produced from this config carries it. The output and source
    /// locations are left out; the dataset fingerprint covers the data.
    pub fn fingerprint(&self) -> String {
        let mut located = self.clone();
        located.output_dir = PathBuf::new();
        located.dataset.source = PathBuf::new();
        let text = located.to_toml().expect("config serializes");
        sha256_hex(format!("{}\0{text}", code_version()).as_bytes())
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            test_class_fraction: self.dataset.test_class_fraction,
            test_classes: self.dataset.test_classes.clone(),
            max_images_per_class: self.dataset.max_images_per_class,
            seed: self.seed,
            on_bad_file: self.dataset.on_bad_file,
        }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output_dir.join("checkpoints")
    }

    pub fn results_dir(&self) -> PathBuf {
        self.output_dir.join("results")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.output_dir.join("report")
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let mut architecture = self.architecture.clone();
        architecture.emit_variance = t.method.is_variational();
        TrainConfig {
            method: t.method,
            train_snr_db: t.snr_db,
            cmc: t.cmc,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            seed: self.seed,
            reconstruction_weight: t.reconstruction_weight,
            normalize_power: t.normalize_power,
            architecture,
            checkpoint_dir: Some(self.checkpoint_dir()),
            log_every: t.log_every,
        }
    }

    pub fn test_snrs(&self) -> anyhow::Result<Vec<f64>> {
        let mut v = parse_snr_range(&self.eval.snr_range)?;
        for &s in &self.eval.extra_snr_db {
            if !v.contains(&s) {
                v.push(s);
            }
        }
        Ok(v)
    }

    pub fn eval_config(&self, mode: EvalMode) -> anyhow::Result<EvalConfig> {
        let e = &self.eval;
        Ok(EvalConfig {
            mode,
            test_snr_db: self.test_snrs()?,
            resample_count: e.resample_count,
            seed: self.seed,
            batch_size: e.batch_size,
            noiseless_variance_link: e.noiseless_variance_link,
            omit_channel_variance: e.omit_channel_variance,
            ssim: e.ssim,
            max_images: e.max_images,
            knowledge_base: None,
        })
    }

    pub fn sweep_cells(&self) -> Vec<SweepCell> {
        expand_grid(&self.sweep.methods, &self.sweep.snr_db, &self.sweep.cmc)
    }
}

/// Applies `a.b.c=value`; the value is parsed as a TOML literal, falling
/// back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> anyhow::Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!("override {spec:?} must look like section.key=value");
    };
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override key {key:?} is malformed");
    }
    let value = parse_literal(raw.trim());
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("override {key:?}: {part:?} is not a section"))?;
    }
    cur.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// The checked-in desk preset, for tests and `init`.
pub const DESK_CONFIG: &str = include_str!("../../../configs/desk.toml");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_preset_parses_and_round_trips() {
        let a = ExperimentConfig::parse(DESK_CONFIG, &[]).unwrap();
        let text = a.to_toml().unwrap();
        let b = ExperimentConfig::parse(&text, &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_toml().unwrap(), text);
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn overrides_reach_any_scalar() {
        let c = ExperimentConfig::parse(
            DESK_CONFIG,
            &[
                "train.epochs=3".into(),
                "train.method=ae".into(),
                "eval.snr_range=0:10:5".into(),
                "train.snr_db=inf".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.method, Method::Ae);
        assert_eq!(c.test_snrs().unwrap()[..3], [0.0, 5.0, 10.0]);
        assert_eq!(c.train.snr_db, f64::INFINITY);
        assert!(!c.train_config().architecture.emit_variance);
    }

    #[test]
    fn bad_fields_are_named() {
        let err = ExperimentConfig::parse(DESK_CONFIG, &["train.epochs=0".into()]).unwrap_err();
        assert!(format!("{err:#}").contains("epochs"));
        let err = ExperimentConfig::parse(DESK_CONFIG, &["train.bogus=1".into()]).unwrap_err();
        assert!(format!("{err:#}").contains("bogus"));
        assert!(ExperimentConfig::parse(DESK_CONFIG, &["novalue".into()]).is_err());
    }

    #[test]
    fn default_grid_has_21_cells() {
        let c = ExperimentConfig::parse(DESK_CONFIG, &[]).unwrap();
        let cells = c.sweep_cells();
        assert_eq!(cells.len(), 21);
        assert_eq!(cells.iter().filter(|c| c.method == Method::Vscc).count(), 15);
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = ExperimentConfig::parse(DESK_CONFIG, &[]).unwrap();
        let b = ExperimentConfig::parse(DESK_CONFIG, &["seed=99".into()]).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn fingerprint_ignores_location() {
        let dir = tempfile::tempdir().unwrap();
        let (x, y) = (dir.path().join("x"), dir.path().join("y"));
        for d in [&x, &y] {
            std::fs::create_dir_all(d).unwrap();
            std::fs::write(d.join("c.toml"), DESK_CONFIG).unwrap();
        }
        let a = ExperimentConfig::load(&x.join("c.toml"), &[]).unwrap();
        let b = ExperimentConfig::load(&y.join("c.toml"), &[]).unwrap();
        assert_ne!(a.output_dir, b.output_dir);
        assert_eq!(a.fingerprint(), b.fingerprint());
    }
}
