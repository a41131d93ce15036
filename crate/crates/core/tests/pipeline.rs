use std::path::Path;

use vscc::coding::Method;
use vscc::datapipe::synthetic::generate_corpus;
use vscc::datapipe::{build_knowledge_base, load_dataset, DatasetSplit, SplitSpec};
use vscc::evaluator::{evaluate, EvalConfig, EvalMode, EvalResult};
use vscc::network::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use vscc::trainer::{train, TrainConfig};

fn corpus(dir: &Path) -> DatasetSplit {
    generate_corpus(dir, 5, 4, 32, 11).unwrap();
    let spec = SplitSpec {
        test_class_fraction: 0.4,
        ..SplitSpec::default()
    };
    load_dataset(dir, &spec, 32).unwrap()
}

fn quick(method: Method) -> TrainConfig {
    TrainConfig {
        method,
        epochs: 1,
        batch_size: 4,
        ..TrainConfig::desk()
    }
}

fn check_result(r: &EvalResult, snrs: usize, images: usize) {
    assert_eq!(r.aggregates.len(), snrs);
    assert_eq!(r.records.len(), snrs * images);
    for rec in &r.records {
        assert!(rec.psnr.min <= rec.psnr.mean && rec.psnr.mean <= rec.psnr.max);
        assert!(rec.ssim.min <= rec.ssim.mean && rec.ssim.mean <= rec.ssim.max);
    }
    for agg in &r.aggregates {
        let per_image: Vec<f64> = r
            .records
            .iter()
            .filter(|rec| rec.test_snr_db.to_bits() == agg.test_snr_db.to_bits())
            .map(|rec| rec.psnr.mean)
            .collect();
        assert_eq!(per_image.len(), images);
        let mean = per_image.iter().sum::<f64>() / images as f64;
        assert!((agg.psnr.mean - mean).abs() < 1e-9);
    }
}

#[test]
fn split_is_class_disjoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    assert!(!data.train.is_empty() && !data.test.is_empty());
    for c in data.test.classes() {
        assert!(!data.train.classes().contains(c), "class {c} on both sides");
    }
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(&dir.path().join("data"));
    let ckpt = train(&quick(Method::Vae), &data).unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&ckpt, &a).unwrap();
    let loaded: Checkpoint = load_checkpoint(&a).unwrap();
    save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(loaded.fingerprint().unwrap(), ckpt.fingerprint().unwrap());
}

#[test]
fn train_then_evaluate_every_mode() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let snrs = vec![-10.0, 5.0, f64::INFINITY];
    let n_test = data.test.len();

    let ae = train(&quick(Method::Ae), &data).unwrap();
    let r = evaluate(&ae, &data.test, &EvalConfig::new(EvalMode::AeDirect, snrs.clone(), 1, 3)).unwrap();
    check_result(&r, 3, n_test);

    let vscc = train(&quick(Method::Vscc), &data).unwrap();
    let net = vscc.build_network::<f32>().unwrap();
    let kb = build_knowledge_base(&net.encoder, &data.train, 8, &vscc.fingerprint().unwrap()).unwrap();
    assert_eq!(kb.shape, [4, 8, 8]);

    let tv = evaluate(&vscc, &data.test, &EvalConfig::new(EvalMode::TransmissionVariance, snrs.clone(), 3, 3)).unwrap();
    check_result(&tv, 3, n_test);
    let mut cfg = EvalConfig::new(EvalMode::FixedVariance, snrs, 3, 3);
    assert!(evaluate(&vscc, &data.test, &cfg).is_err(), "fixed mode without a knowledge base");
    cfg.knowledge_base = Some(kb);
    let fixed = evaluate(&vscc, &data.test, &cfg).unwrap();
    check_result(&fixed, 3, n_test);

    assert!(evaluate(&ae, &data.test, &cfg).is_err(), "fixed mode on an AE checkpoint");
}
