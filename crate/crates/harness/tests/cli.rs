use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vscc_harness::config::DESK_CONFIG;

const TINY: &[&str] = &[
    "dataset.source=\"data\"",
    "output_dir=\"runs\"",
    "dataset.synthetic.classes=5",
    "dataset.synthetic.per_class=4",
    "train.epochs=1",
    "eval.resample_count=2",
    "eval.snr_range=\"0:10:5\"",
    "sweep.snr_db=[5.0]",
    "sweep.cmc=[5.0]",
];

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("c.toml"), DESK_CONFIG).unwrap();
        Workspace { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_with(args, &[])
    }

    fn run_with(&self, args: &[&str], extra: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_vscc"));
        cmd.current_dir(self.dir.path()).args(args);
        let takes_config = !matches!(args.first(), Some(&"metrics"));
        if takes_config {
            cmd.args(["--config", "c.toml"]);
            for s in TINY.iter().chain(extra) {
                cmd.args(["--set", s]);
            }
        }
        cmd.output().unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn mtime(p: &Path) -> std::time::SystemTime {
    std::fs::metadata(p).unwrap().modified().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    let bin = env!("CARGO_BIN_EXE_vscc");
    assert_eq!(Command::new(bin).output().unwrap().status.code(), Some(1));
    assert_eq!(Command::new(bin).arg("frobnicate").output().unwrap().status.code(), Some(1));
    assert_eq!(Command::new(bin).arg("--help").output().unwrap().status.code(), Some(0));
    assert_eq!(Command::new(bin).args(["train"]).output().unwrap().status.code(), Some(1));
}

#[test]
fn unknown_config_key_names_the_field() {
    let ws = Workspace::new();
    let o = ws.run_with(&["train"], &["train.epoch_count=3"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("epoch_count"), "{}", stderr(&o));
}

#[test]
fn missing_dataset_points_at_gen_corpus() {
    let ws = Workspace::new();
    let o = ws.run(&["train"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("gen-corpus"), "{}", stderr(&o));
}

#[test]
fn metrics_on_identical_files_is_infinite() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.run(&["gen-corpus"])), 0);
    let img = ws.path("data/class_000/00000.png");
    let o = ws.run(&["metrics", img.to_str().unwrap(), img.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("psnr_db=inf"), "{out}");
    assert!(out.contains("ssim=1.000000"), "{out}");

    let missing = ws.path("nope.png");
    let o = ws.run(&["metrics", img.to_str().unwrap(), missing.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn full_pipeline() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.run(&["gen-corpus"])), 0);

    let o = ws.run(&["eval"]);
    assert_eq!(code(&o), 1, "eval before training");
    assert!(stderr(&o).contains("vscc sweep"), "{}", stderr(&o));

    assert_eq!(code(&ws.run(&["sweep"])), 0);
    let ckpt = ws.path("runs/checkpoints/vscc_snr5_cmc5.ckpt");
    let ae = ws.path("runs/checkpoints/ae_snr5.ckpt");
    let before = mtime(&ckpt);
    let o = ws.run(&["sweep"]);
    assert_eq!(code(&o), 0);
    assert_eq!(mtime(&ckpt), before, "finished cell was retrained");
    assert!(stderr(&o).contains("3 skipped"), "{}", stderr(&o));

    // Mode and method must agree.
    let o = ws.run(&["eval", "--checkpoint", ae.to_str().unwrap(), "--mode", "transmission"]);
    assert_eq!(code(&o), 1);
    let o = ws.run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--mode", "ae"]);
    assert_eq!(code(&o), 1);

    let o = ws.run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--mode", "fixed"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("kb-build"), "{}", stderr(&o));

    assert_eq!(code(&ws.run(&["kb-build"])), 0);
    assert!(ws.path("runs/checkpoints/vscc_snr5_cmc5.kb.json").exists());
    assert!(!ws.path("runs/checkpoints/ae_snr5.kb.json").exists());

    let o = ws.run(&["eval"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    // 2 variational models x 2 modes + AE, each over 0, 5, 10 and inf.
    assert_eq!(stdout.lines().count(), 5 * 4, "{stdout}");
    for stem in ["vscc_snr5_cmc5.transmission", "vscc_snr5_cmc5.fixed", "vae_snr5.fixed", "ae_snr5.ae"] {
        for ext in ["json", "csv", "summary.csv"] {
            assert!(ws.path(&format!("runs/results/{stem}.{ext}")).exists(), "{stem}.{ext}");
        }
    }

    let o = ws.run(&["report"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let svg = std::fs::read_to_string(ws.path("runs/report/methods_snr5_psnr.svg")).unwrap();
    assert!(svg.contains("experiment_fingerprint="));
    let best = std::fs::read_to_string(ws.path("runs/report/best_cmc.md")).unwrap();
    assert!(best.contains("| 5 | 5 |"), "{best}");

    // Re-evaluating one model under a different config mixes fingerprints.
    let o = ws.run_with(
        &["eval", "--checkpoint", ae.to_str().unwrap()],
        &["eval.resample_count=3"],
    );
    assert_eq!(code(&o), 0);
    let o = ws.run(&["report"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--allow-mixed"), "{}", stderr(&o));
    assert_eq!(code(&ws.run(&["report", "--allow-mixed"])), 0);
}

#[test]
fn single_train_with_shortcuts() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.run(&["gen-corpus"])), 0);
    let o = ws.run(&["train", "--method", "vae", "--snr", "-5", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.trim().ends_with("vae_snr-5.ckpt"), "{out}");

    let o = ws.run(&["train", "--snr", "loud"]);
    assert_eq!(code(&o), 1);
}
