//! Subcommand implementations. Each returns a [`CliError`] that maps onto
//! the process exit code.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use vscc::coding::Method;
use vscc::datapipe::{build_knowledge_base, load_dataset, synthetic, DatasetSplit, KnowledgeBase};
use vscc::evaluator::{evaluate, parse_snr_range, psnr, ssim, EvalMode, EvalResult, SsimConfig};
use vscc::network::checkpoint::{load_checkpoint, Checkpoint};
use vscc::network::Network;
use vscc::trainer::{sweep, CellStatus, FailurePolicy, SweepCell, SweepManifest, MANIFEST_FILE};

use crate::config::ExperimentConfig;
use crate::report;

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation, bad config or a missing prerequisite (exit 1).
    Usage(anyhow::Error),
    /// Failure while doing the work (exit 2).
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(e) | CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn usage(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Usage(e.into())
}

/// Configuration problems reported by the library are usage errors.
fn classify(e: anyhow::Error) -> CliError {
    match e.downcast_ref::<vscc::Error>() {
        Some(vscc::Error::Config(_)) | Some(vscc::Error::UnsupportedMethod(_)) => CliError::Usage(e),
        _ => CliError::Runtime(e),
    }
}

fn runtime<T>(r: vscc::Result<T>) -> CliResult<T> {
    r.map_err(|e| classify(e.into()))
}

pub fn load_config(path: &Path, overrides: &[String]) -> CliResult<ExperimentConfig> {
    ExperimentConfig::load(path, overrides).map_err(usage)
}

pub fn load_data(cfg: &ExperimentConfig, config_path: &Path) -> CliResult<DatasetSplit> {
    let src = &cfg.dataset.source;
    if !src.exists() {
        return Err(usage(anyhow!(
            "dataset source {} does not exist; create it with `vscc gen-corpus --config {}` or point dataset.source at a class-folder tree",
            src.display(),
            config_path.display()
        )));
    }
    let data = runtime(load_dataset(src, &cfg.split_spec(), cfg.dataset.crop_size))?;
    log::info!(
        "dataset: {} train / {} test images, {} / {} classes, fingerprint {}",
        data.train.len(),
        data.test.len(),
        data.train.classes().len(),
        data.test.classes().len(),
        &data.fingerprint[..12]
    );
    let manifest = cfg.output_dir.join("split.tsv");
    runtime(data.write_manifest(&manifest))?;
    Ok(data)
}

pub fn gen_corpus(out: &Path, classes: usize, per_class: usize, size: usize, seed: u64) -> CliResult<()> {
    runtime(synthetic::generate_corpus(out, classes, per_class, size, seed))?;
    log::info!("wrote {} images to {}", classes * per_class, out.display());
    Ok(())
}

pub fn gen_corpus_from_config(cfg: &ExperimentConfig) -> CliResult<()> {
    let syn = cfg.dataset.synthetic.ok_or_else(|| {
        usage(anyhow!("config has no [dataset.synthetic] section; pass --out/--classes/--per-class instead"))
    })?;
    gen_corpus(&cfg.dataset.source, syn.classes, syn.per_class, cfg.dataset.crop_size, cfg.seed)
}

/// Trains `cells` and returns the manifest. Failed cells make the command
/// fail after the whole grid has been attempted.
pub fn train_cells(
    cfg: &ExperimentConfig,
    data: &DatasetSplit,
    cells: &[SweepCell],
    fail_fast: bool,
) -> CliResult<SweepManifest> {
    let policy = if fail_fast {
        FailurePolicy::FailFast
    } else {
        FailurePolicy::Continue
    };
    let manifest = runtime(sweep(cells, &cfg.train_config(), data, &cfg.checkpoint_dir(), policy))?;
    let touched: Vec<_> = manifest
        .records
        .iter()
        .filter(|r| cells.contains(&r.cell))
        .collect();
    let failed = touched.iter().filter(|r| r.status == CellStatus::Failed).count();
    let skipped = touched.iter().filter(|r| r.status == CellStatus::Skipped).count();
    log::info!(
        "{} cells: {} trained, {skipped} skipped, {failed} failed",
        cells.len(),
        cells.len() - skipped - failed
    );
    if failed > 0 {
        return Err(CliError::Runtime(anyhow!(
            "{failed} cell(s) failed; see {}",
            cfg.checkpoint_dir().join(MANIFEST_FILE).display()
        )));
    }
    Ok(manifest)
}

/// Checkpoints named by `explicit`, or every completed manifest entry.
fn checkpoints(cfg: &ExperimentConfig, explicit: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    if !explicit.is_empty() {
        for p in explicit {
            if !p.exists() {
                return Err(usage(anyhow!(
                    "checkpoint {} not found; produce it with `vscc train` or `vscc sweep`",
                    p.display()
                )));
            }
        }
        return Ok(explicit.to_vec());
    }
    let manifest_path = cfg.checkpoint_dir().join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(usage(anyhow!(
            "no sweep manifest at {}; run `vscc train` or `vscc sweep` first",
            manifest_path.display()
        )));
    }
    let manifest = runtime(SweepManifest::load(&manifest_path))?;
    let paths: Vec<PathBuf> = manifest.completed().map(|r| r.checkpoint.clone()).collect();
    if paths.is_empty() {
        return Err(usage(anyhow!("manifest lists no completed checkpoints")));
    }
    Ok(paths)
}

/// Conventional location of a checkpoint's knowledge base.
pub fn kb_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("kb.json")
}

pub fn kb_build(
    cfg: &ExperimentConfig,
    data: &DatasetSplit,
    explicit: &[PathBuf],
    out: Option<&Path>,
) -> CliResult<Vec<PathBuf>> {
    let paths = checkpoints(cfg, explicit)?;
    if out.is_some() && paths.len() != 1 {
        return Err(usage(anyhow!("--out needs exactly one --checkpoint")));
    }
    let mut written = Vec::new();
    for path in paths {
        let ckpt = runtime(load_checkpoint(&path))?;
        if !ckpt.metadata.method.is_variational() {
            if explicit.is_empty() {
                continue;
            }
            return Err(usage(anyhow!(
                "{} is an {} checkpoint; knowledge bases exist only for vscc and vae",
                path.display(),
                ckpt.metadata.method
            )));
        }
        let net: Network<f32> = runtime(ckpt.build_network())?;
        let fp = runtime(ckpt.fingerprint())?;
        let kb = runtime(build_knowledge_base(&net.encoder, &data.train, cfg.eval.batch_size, &fp))?;
        let dest = out.map(Path::to_path_buf).unwrap_or_else(|| kb_path(&path));
        runtime(kb.save(&dest))?;
        log::info!(
            "knowledge base {} (mean variance {:.5})",
            dest.display(),
            kb.scalar_variance
        );
        written.push(dest);
    }
    Ok(written)
}

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub checkpoints: Vec<PathBuf>,
    pub mode: Option<EvalMode>,
    pub snr_range: Option<String>,
    pub resamples: Option<usize>,
    pub kb: Option<PathBuf>,
}

/// Evaluates checkpoints and writes `<cell>.<mode>.{json,csv,summary.csv}`
/// into the results directory.
pub fn eval(cfg: &ExperimentConfig, data: &DatasetSplit, args: &EvalArgs) -> CliResult<Vec<EvalResult>> {
    let paths = checkpoints(cfg, &args.checkpoints)?;
    let modes = match args.mode {
        Some(m) => vec![m],
        None => cfg.eval.modes.clone(),
    };
    let mut out = Vec::new();
    for path in &paths {
        let ckpt = runtime(load_checkpoint(path))?;
        let method = ckpt.metadata.method;
        let usable: Vec<EvalMode> = modes.iter().copied().filter(|m| m.compatible_with(method)).collect();
        if usable.is_empty() {
            if args.mode.is_some() && !args.checkpoints.is_empty() {
                return Err(usage(anyhow!(
                    "mode {} cannot evaluate {} ({} checkpoint); use {}",
                    modes[0],
                    path.display(),
                    method,
                    if method == Method::Ae { "--mode ae" } else { "--mode transmission or --mode fixed" }
                )));
            }
            continue;
        }
        for mode in usable {
            let result = eval_one(cfg, data, &ckpt, path, mode, args)?;
            out.push(result);
        }
    }
    if out.is_empty() {
        return Err(usage(anyhow!("no checkpoint is compatible with the requested mode(s)")));
    }
    Ok(out)
}

fn eval_one(
    cfg: &ExperimentConfig,
    data: &DatasetSplit,
    ckpt: &Checkpoint,
    path: &Path,
    mode: EvalMode,
    args: &EvalArgs,
) -> CliResult<EvalResult> {
    let mut ec = cfg.eval_config(mode).map_err(usage)?;
    if let Some(r) = &args.snr_range {
        ec.test_snr_db = parse_snr_range(r).map_err(|e| usage(anyhow::Error::from(e).context("--snr-range")))?;
    }
    if let Some(n) = args.resamples {
        ec.resample_count = n;
    }
    if mode == EvalMode::FixedVariance {
        let kb_file = args.kb.clone().unwrap_or_else(|| kb_path(path));
        if !kb_file.exists() {
            return Err(usage(anyhow!(
                "fixed-variance evaluation needs the knowledge base {}; build it with `vscc kb-build --checkpoint {}`",
                kb_file.display(),
                path.display()
            )));
        }
        let kb = runtime(KnowledgeBase::load(&kb_file))?;
        let fp = runtime(ckpt.fingerprint())?;
        if kb.model_fingerprint != fp {
            log::warn!("knowledge base {} was built from a different checkpoint", kb_file.display());
        }
        ec.knowledge_base = Some(kb);
    }
    if ckpt.metadata.dataset_fingerprint != data.fingerprint {
        log::warn!("{} was trained on a different dataset split", path.display());
    }
    let mut result = runtime(evaluate(ckpt, &data.test, &ec))?;
    result.provenance.experiment_fingerprint = Some(cfg.fingerprint());
    let stem = format!(
        "{}.{}",
        path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        mode
    );
    runtime(result.write(&cfg.results_dir(), &stem))?;
    for a in &result.aggregates {
        log::info!(
            "{stem} test_snr_db={} psnr={:.3} ssim={:.4}",
            vscc::evaluator::fmt_float(a.test_snr_db),
            a.psnr.mean,
            a.ssim.mean
        );
    }
    Ok(result)
}

pub fn report(results_dir: &Path, out_dir: &Path, allow_mixed: bool) -> CliResult<report::ReportOutput> {
    let results = report::load_results(results_dir).map_err(CliError::Runtime)?;
    report::check_fingerprints(&results, allow_mixed).map_err(CliError::Usage)?;
    report::write_report(&results, out_dir, allow_mixed).map_err(CliError::Runtime)
}

/// PSNR and SSIM between two image files of equal size.
pub fn metrics(a: &Path, b: &Path) -> CliResult<(f64, f64)> {
    let open = |p: &Path| {
        image::open(p)
            .map(|i| i.to_rgb8())
            .with_context(|| format!("cannot read image {}", p.display()))
            .map_err(usage)
    };
    let (x, y) = (open(a)?, open(b)?);
    if x.dimensions() != y.dimensions() {
        return Err(usage(anyhow!(
            "images differ in size: {:?} vs {:?}",
            x.dimensions(),
            y.dimensions()
        )));
    }
    let (w, h) = x.dimensions();
    let p = runtime(psnr(x.as_raw(), y.as_raw(), 255.0))?;
    let s = runtime(ssim(x.as_raw(), y.as_raw(), [h as usize, w as usize, 3], &SsimConfig::default()))?;
    Ok((p, s))
}
