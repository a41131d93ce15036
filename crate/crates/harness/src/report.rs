//! Plots and tables over a directory of evaluation results.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use plotters::prelude::*;
use vscc::coding::Method;
use vscc::evaluator::{fmt_float, EvalMode, EvalResult, SnrAggregate, PSNR_PLOT_CAP_DB};
use vscc::network::checkpoint::write_atomic;

/// Loads every `*.json` evaluation result under `dir`, sorted by path.
pub fn load_results(dir: &Path) -> anyhow::Result<Vec<(PathBuf, EvalResult)>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let r = EvalResult::load(&p).with_context(|| format!("cannot read results {}", p.display()))?;
            Ok((p, r))
        })
        .collect()
}

/// Fails when results come from different experiment configs or code
/// versions, unless `allow_mixed`.
pub fn check_fingerprints(results: &[(PathBuf, EvalResult)], allow_mixed: bool) -> anyhow::Result<String> {
    let keys: BTreeSet<(String, String)> = results
        .iter()
        .map(|(_, r)| {
            (
                r.provenance.experiment_fingerprint.clone().unwrap_or_else(|| "unknown".into()),
                r.provenance.code_version.clone(),
            )
        })
        .collect();
    if keys.len() > 1 && !allow_mixed {
        let list: Vec<String> = keys.iter().map(|(f, v)| format!("{f} ({v})")).collect();
        bail!(
            "results come from {} different experiment fingerprints: {}; pass --allow-mixed to report them together",
            keys.len(),
            list.join(", ")
        );
    }
    Ok(keys.iter().map(|(f, _)| f.as_str()).collect::<Vec<_>>().join("+"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Metric {
    Psnr,
    Ssim,
}

impl Metric {
    fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
        }
    }

    fn pick(self, a: &SnrAggregate) -> (f64, f64, f64) {
        let s = match self {
            Metric::Psnr => a.psnr,
            Metric::Ssim => a.ssim,
        };
        let cap = |v: f64| match self {
            Metric::Psnr => v.min(PSNR_PLOT_CAP_DB),
            Metric::Ssim => v,
        };
        (cap(s.mean), cap(s.min), cap(s.max))
    }
}

struct Line<'a> {
    label: String,
    color: RGBColor,
    star: bool,
    result: &'a EvalResult,
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(214, 39, 40),
    RGBColor(31, 119, 180),
    RGBColor(44, 160, 44),
    RGBColor(255, 127, 14),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// Finite test SNRs only; the noiseless point has no place on the axis.
fn points(r: &EvalResult, metric: Metric) -> Vec<(f64, (f64, f64, f64))> {
    r.aggregates
        .iter()
        .filter(|a| a.test_snr_db.is_finite())
        .map(|a| (a.test_snr_db, metric.pick(a)))
        .collect()
}

fn plot(path: &Path, title: &str, metric: Metric, lines: &[Line], stamp: &str) -> anyhow::Result<()> {
    let all: Vec<(f64, (f64, f64, f64))> = lines.iter().flat_map(|l| points(l.result, metric)).collect();
    if all.is_empty() {
        return Ok(());
    }
    let (x0, x1) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (x, _)| (a.min(*x), b.max(*x)));
    let (y0, y1) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (_, (_, lo, hi))| {
        (a.min(*lo), b.max(*hi))
    });
    let pad = ((y1 - y0) * 0.08).max(1e-3);
    let x_pad = if x1 > x0 { 0.0 } else { 1.0 };
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (720, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(56)
            .build_cartesian_2d((x0 - x_pad)..(x1 + x_pad), (y0 - pad)..(y1 + pad))
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("test SNR (dB)")
            .y_desc(metric.name().to_uppercase())
            .draw()
            .map_err(plot_err)?;
        for line in lines {
            let pts = points(line.result, metric);
            let mut band: Vec<(f64, f64)> = pts.iter().map(|(x, (_, _, hi))| (*x, *hi)).collect();
            band.extend(pts.iter().rev().map(|(x, (_, lo, _))| (*x, *lo)));
            chart
                .draw_series(std::iter::once(Polygon::new(band, line.color.mix(0.15).filled())))
                .map_err(plot_err)?;
            let color = line.color;
            let mean: Vec<(f64, f64)> = pts.iter().map(|(x, (m, _, _))| (*x, *m)).collect();
            chart
                .draw_series(LineSeries::new(mean.clone(), color.stroke_width(2)))
                .map_err(plot_err)?
                .label(line.label.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
            if line.star {
                chart
                    .draw_series(mean.iter().map(|&p| TriangleMarker::new(p, 5, color.filled())))
                    .map_err(plot_err)?;
            } else {
                chart
                    .draw_series(mean.iter().map(|&p| Circle::new(p, 4, color.filled())))
                    .map_err(plot_err)?;
            }
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    let svg = svg.replacen('>', &format!(">\n<!-- {stamp} -->"), 1);
    write_atomic(path, svg.as_bytes())?;
    Ok(())
}

fn plot_err<E: std::fmt::Display>(e: E) -> anyhow::Error {
    anyhow::anyhow!("plotting failed: {e}")
}

fn snr_key(v: f64) -> String {
    fmt_float(v)
}

/// Mean metric of `r` at its own training SNR.
fn at_train_snr(r: &EvalResult) -> Option<&SnrAggregate> {
    r.aggregate_at(r.provenance.train_snr_db)
}

/// Everything `report` writes.
#[derive(Debug, Default)]
pub struct ReportOutput {
    pub files: Vec<PathBuf>,
}

pub fn write_report(
    results: &[(PathBuf, EvalResult)],
    out_dir: &Path,
    allow_mixed: bool,
) -> anyhow::Result<ReportOutput> {
    let mut out = ReportOutput::default();
    if results.is_empty() {
        log::warn!("no evaluation results found; nothing to report");
        return Ok(out);
    }
    let fingerprint = check_fingerprints(results, allow_mixed)?;
    let code_version = vscc::fingerprint::code_version();
    let stamp = format!("experiment_fingerprint={fingerprint} code_version={code_version}");
    let rs: Vec<&EvalResult> = results.iter().map(|(_, r)| r).collect();

    // Transmission vs fixed variance for each VSCC checkpoint.
    let mut by_ckpt: BTreeMap<(String, String), Vec<&EvalResult>> = BTreeMap::new();
    for r in rs.iter().filter(|r| r.provenance.method == Method::Vscc) {
        let p = &r.provenance;
        by_ckpt.entry((snr_key(p.train_snr_db), fmt_float(p.cmc))).or_default().push(r);
    }
    for ((snr, cmc), group) in &by_ckpt {
        let mut lines = Vec::new();
        for (mode, color, star) in [
            (EvalMode::TransmissionVariance, PALETTE[0], false),
            (EvalMode::FixedVariance, PALETTE[1], true),
        ] {
            if let Some(r) = group.iter().find(|r| r.config.mode == mode) {
                lines.push(Line {
                    label: format!("{mode} variance"),
                    color,
                    star,
                    result: r,
                });
            }
        }
        for metric in [Metric::Psnr, Metric::Ssim] {
            let path = out_dir.join(format!("modes_vscc_snr{snr}_cmc{cmc}_{}.svg", metric.name()));
            let title = format!("VSCC train {snr} dB, CMC {cmc}: resampling modes");
            plot(&path, &title, metric, &lines, &stamp)?;
            out.files.push(path);
        }
    }

    // One line per CMC at each training SNR (fixed variance).
    let mut by_snr: BTreeMap<String, Vec<&EvalResult>> = BTreeMap::new();
    for r in rs
        .iter()
        .filter(|r| r.provenance.method == Method::Vscc && r.config.mode == EvalMode::FixedVariance)
    {
        by_snr.entry(snr_key(r.provenance.train_snr_db)).or_default().push(r);
    }
    for (snr, mut group) in by_snr {
        group.sort_by(|a, b| a.provenance.cmc.total_cmp(&b.provenance.cmc));
        let lines: Vec<Line> = group
            .iter()
            .enumerate()
            .map(|(i, r)| Line {
                label: format!("CMC {}", fmt_float(r.provenance.cmc)),
                color: PALETTE[i % PALETTE.len()],
                star: false,
                result: r,
            })
            .collect();
        for metric in [Metric::Psnr, Metric::Ssim] {
            let path = out_dir.join(format!("cmc_snr{snr}_{}.svg", metric.name()));
            plot(&path, &format!("VSCC train {snr} dB: CMC comparison"), metric, &lines, &stamp)?;
            out.files.push(path);
        }
    }

    // VSCC (best CMC) vs VAE vs AE at each training SNR.
    let best = best_cmc(&rs);
    let mut snrs: BTreeSet<String> = BTreeSet::new();
    rs.iter().for_each(|r| {
        snrs.insert(snr_key(r.provenance.train_snr_db));
    });
    for snr in snrs {
        let same = |r: &&&EvalResult| snr_key(r.provenance.train_snr_db) == snr;
        let vscc = best
            .iter()
            .find(|b| snr_key(b.train_snr_db) == snr)
            .and_then(|b| {
                rs.iter().filter(same).find(|r| {
                    r.provenance.method == Method::Vscc
                        && r.config.mode == EvalMode::FixedVariance
                        && r.provenance.cmc == b.cmc
                })
            });
        let vae = rs
            .iter()
            .filter(same)
            .find(|r| r.provenance.method == Method::Vae && r.config.mode == EvalMode::FixedVariance);
        let ae = rs.iter().filter(same).find(|r| r.provenance.method == Method::Ae);
        let lines: Vec<Line> = [(vscc, "VSCC"), (vae, "VAE"), (ae, "AE")]
            .into_iter()
            .enumerate()
            .filter_map(|(i, (r, name))| {
                r.map(|r| Line {
                    label: name.to_string(),
                    color: PALETTE[i],
                    star: i == 1,
                    result: r,
                })
            })
            .collect();
        if lines.len() < 2 {
            continue;
        }
        for metric in [Metric::Psnr, Metric::Ssim] {
            let path = out_dir.join(format!("methods_snr{snr}_{}.svg", metric.name()));
            plot(&path, &format!("Methods at train {snr} dB"), metric, &lines, &stamp)?;
            out.files.push(path);
        }
    }

    let summary = summary_table(&rs, &fingerprint)?;
    let path = out_dir.join("summary_table.csv");
    write_atomic(&path, &summary)?;
    out.files.push(path);

    let path = out_dir.join("best_cmc.md");
    write_atomic(&path, best_cmc_markdown(&best, &stamp).as_bytes())?;
    out.files.push(path);
    Ok(out)
}

/// One row per (method, train SNR, CMC, mode), scored at the training SNR.
fn summary_table(rs: &[&EvalResult], fingerprint: &str) -> anyhow::Result<Vec<u8>> {
    let mut rows: Vec<&EvalResult> = rs.to_vec();
    rows.sort_by(|a, b| {
        let (pa, pb) = (&a.provenance, &b.provenance);
        pa.train_snr_db
            .total_cmp(&pb.train_snr_db)
            .then(pa.method.as_str().cmp(pb.method.as_str()))
            .then(pa.cmc.total_cmp(&pb.cmc))
            .then(a.config.mode.cmp(&b.config.mode))
    });
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "train_snr_db",
        "method",
        "cmc",
        "mode",
        "psnr_mean",
        "psnr_min",
        "psnr_max",
        "ssim_mean",
        "ssim_min",
        "ssim_max",
        "checkpoint_fingerprint",
        "experiment_fingerprint",
    ])?;
    for r in rows {
        let Some(a) = at_train_snr(r) else { continue };
        let p = &r.provenance;
        w.write_record([
            fmt_float(p.train_snr_db),
            p.method.to_string(),
            if p.method == Method::Vscc { fmt_float(p.cmc) } else { String::new() },
            r.config.mode.to_string(),
            fmt_float(a.psnr.mean),
            fmt_float(a.psnr.min),
            fmt_float(a.psnr.max),
            fmt_float(a.ssim.mean),
            fmt_float(a.ssim.min),
            fmt_float(a.ssim.max),
            p.checkpoint_fingerprint.clone(),
            fingerprint.to_string(),
        ])?;
    }
    Ok(w.into_inner()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestCmc {
    pub train_snr_db: f64,
    pub cmc: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub best_ssim_cmc: f64,
}

/// Highest fixed-variance PSNR (and SSIM) over CMC at each training SNR,
/// scored at that SNR.
pub fn best_cmc(rs: &[&EvalResult]) -> Vec<BestCmc> {
    let mut by_snr: BTreeMap<String, Vec<(f64, &SnrAggregate)>> = BTreeMap::new();
    let mut snr_of: BTreeMap<String, f64> = BTreeMap::new();
    for r in rs
        .iter()
        .filter(|r| r.provenance.method == Method::Vscc && r.config.mode == EvalMode::FixedVariance)
    {
        if let Some(a) = at_train_snr(r) {
            let k = snr_key(r.provenance.train_snr_db);
            snr_of.insert(k.clone(), r.provenance.train_snr_db);
            by_snr.entry(k).or_default().push((r.provenance.cmc, a));
        }
    }
    let mut out: Vec<BestCmc> = by_snr
        .into_iter()
        .map(|(k, v)| {
            let p = v.iter().max_by(|a, b| a.1.psnr.mean.total_cmp(&b.1.psnr.mean)).expect("non-empty");
            let s = v.iter().max_by(|a, b| a.1.ssim.mean.total_cmp(&b.1.ssim.mean)).expect("non-empty");
            BestCmc {
                train_snr_db: snr_of[&k],
                cmc: p.0,
                psnr: p.1.psnr.mean,
                ssim: s.1.ssim.mean,
                best_ssim_cmc: s.0,
            }
        })
        .collect();
    out.sort_by(|a, b| a.train_snr_db.total_cmp(&b.train_snr_db));
    out
}

fn best_cmc_markdown(best: &[BestCmc], stamp: &str) -> String {
    let mut s = format!("<!-- {stamp} -->\n\n");
    s.push_str("| train SNR (dB) | best CMC (PSNR) | PSNR (dB) | best CMC (SSIM) | SSIM |\n");
    s.push_str("|---:|---:|---:|---:|---:|\n");
    for b in best {
        let _ = writeln!(
            s,
            "| {} | {} | {:.3} | {} | {:.4} |",
            fmt_float(b.train_snr_db),
            fmt_float(b.cmc),
            b.psnr,
            fmt_float(b.best_ssim_cmc),
            b.ssim
        );
    }
    if best.is_empty() {
        s.push_str("\n_No fixed-variance VSCC results evaluated at their training SNR._\n");
    }
    s
}
