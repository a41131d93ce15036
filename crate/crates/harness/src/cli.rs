//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use vscc::coding::Method;
use vscc::evaluator::{fmt_float, EvalMode};
use vscc::trainer::SweepCell;

use crate::commands::{self, CliError, CliResult, EvalArgs};

#[derive(Debug, Parser)]
#[command(name = "vscc", version, about = "Train, evaluate and report semantic image transmission models")]
pub struct Cli {
    /// Log debug output.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(short, long)]
    pub config: PathBuf,
    /// Override any config value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model (one grid cell).
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        method: Option<Method>,
        /// Training SNR in dB (`inf` for a noiseless channel).
        #[arg(long, allow_hyphen_values = true)]
        snr: Option<String>,
        #[arg(long)]
        cmc: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train every cell of the configured grid, skipping finished ones.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Stop at the first failing cell.
        #[arg(long)]
        fail_fast: bool,
    },
    /// Build the receiver-side variance statistics for checkpoints.
    KbBuild {
        #[command(flatten)]
        config: ConfigArgs,
        /// Defaults to every variational checkpoint in the manifest.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score checkpoints over the test-SNR axis.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Defaults to every checkpoint in the manifest.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// ae, transmission or fixed; defaults to the config's modes.
        #[arg(long)]
        mode: Option<EvalMode>,
        /// `start:stop:step` in dB, inclusive.
        #[arg(long, allow_hyphen_values = true)]
        snr_range: Option<String>,
        #[arg(long)]
        resamples: Option<usize>,
        /// Knowledge base for fixed-variance mode.
        #[arg(long)]
        kb: Option<PathBuf>,
    },
    /// Plots and tables from evaluation results.
    Report {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Results directory (defaults to the config's).
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Report results from different experiment configs together.
        #[arg(long)]
        allow_mixed: bool,
    },
    /// PSNR and SSIM between two image files.
    Metrics { reference: PathBuf, candidate: PathBuf },
    /// Write a procedural class-folder image corpus.
    GenCorpus {
        /// Use the config's dataset source and [dataset.synthetic] section.
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, required_unless_present = "config")]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 40)]
        classes: usize,
        #[arg(long, default_value_t = 30)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train {
            config,
            method,
            snr,
            cmc,
            epochs,
            seed,
        } => {
            let mut overrides = config.overrides.clone();
            if let Some(m) = method {
                overrides.push(format!("train.method=\"{m}\""));
            }
            if let Some(s) = &snr {
                overrides.push(format!("train.snr_db={}", snr_literal(s)?));
            }
            if let Some(c) = cmc {
                overrides.push(format!("train.cmc={}", toml_float(c)));
            }
            if let Some(e) = epochs {
                overrides.push(format!("train.epochs={e}"));
            }
            if let Some(s) = seed {
                overrides.push(format!("seed={s}"));
            }
            let cfg = commands::load_config(&config.config, &overrides)?;
            let data = commands::load_data(&cfg, &config.config)?;
            let t = &cfg.train;
            let cell = SweepCell {
                method: t.method,
                snr_db: t.snr_db,
                cmc: (t.method == Method::Vscc).then_some(t.cmc),
            };
            let m = commands::train_cells(&cfg, &data, &[cell], true)?;
            if let Some(r) = m.records.iter().find(|r| r.cell == cell) {
                println!("{}", r.checkpoint.display());
            }
            Ok(())
        }
        Command::Sweep { config, fail_fast } => {
            let cfg = commands::load_config(&config.config, &config.overrides)?;
            let data = commands::load_data(&cfg, &config.config)?;
            let cells = cfg.sweep_cells();
            commands::train_cells(&cfg, &data, &cells, fail_fast || cfg.sweep.fail_fast)?;
            Ok(())
        }
        Command::KbBuild { config, checkpoint, out } => {
            let cfg = commands::load_config(&config.config, &config.overrides)?;
            let data = commands::load_data(&cfg, &config.config)?;
            for p in commands::kb_build(&cfg, &data, &checkpoint, out.as_deref())? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            mode,
            snr_range,
            resamples,
            kb,
        } => {
            let cfg = commands::load_config(&config.config, &config.overrides)?;
            let data = commands::load_data(&cfg, &config.config)?;
            let args = EvalArgs {
                checkpoints: checkpoint,
                mode,
                snr_range,
                resamples,
                kb,
            };
            for r in commands::eval(&cfg, &data, &args)? {
                let p = &r.provenance;
                for a in &r.aggregates {
                    println!(
                        "{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.5}",
                        p.method,
                        fmt_float(p.train_snr_db),
                        fmt_float(p.cmc),
                        r.config.mode,
                        fmt_float(a.test_snr_db),
                        a.psnr.mean,
                        a.ssim.mean
                    );
                }
            }
            Ok(())
        }
        Command::Report {
            config,
            overrides,
            results,
            out,
            allow_mixed,
        } => {
            let cfg = config
                .as_deref()
                .map(|c| commands::load_config(c, &overrides))
                .transpose()?;
            let pick = |given: Option<PathBuf>, from_cfg: fn(&crate::config::ExperimentConfig) -> PathBuf, flag: &str| {
                given.or_else(|| cfg.as_ref().map(from_cfg)).ok_or_else(|| {
                    CliError::Usage(anyhow::anyhow!("pass --config or {flag}"))
                })
            };
            let results = pick(results, |c| c.results_dir(), "--results")?;
            let out = pick(out, |c| c.report_dir(), "--out")?;
            let written = commands::report(&results, &out, allow_mixed)?;
            for f in written.files {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::Metrics { reference, candidate } => {
            let (p, s) = commands::metrics(&reference, &candidate)?;
            println!("psnr_db={}\tssim={s:.6}", fmt_float(p));
            Ok(())
        }
        Command::GenCorpus {
            config,
            overrides,
            out,
            classes,
            per_class,
            size,
            seed,
        } => match config {
            Some(c) => {
                let cfg = commands::load_config(&c, &overrides)?;
                commands::gen_corpus_from_config(&cfg)
            }
            None => {
                let out = out.expect("clap enforces --out without --config");
                commands::gen_corpus(&out, classes, per_class, size, seed)
            }
        },
    }
}

fn snr_literal(s: &str) -> CliResult<String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "inf" | "+inf" | "infinity" => Ok("inf".into()),
        other => other
            .parse::<f64>()
            .map(toml_float)
            .map_err(|_| CliError::Usage(anyhow::anyhow!("--snr {s:?} is not a number or `inf`"))),
    }
}

/// TOML needs a decimal point to read a float.
fn toml_float(v: f64) -> String {
    let s = format!("{v}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}
