use std::path::Path;

use samlab_harness::checkpoint::Checkpoint;
use samlab_harness::data::load_dataset;
use samlab_harness::{train, DataKind, DatasetSpec, RunConfig, TrainOptions};

fn config(epochs: usize) -> RunConfig {
    RunConfig::from_json(&format!(
        r#"{{
        "model": {{"architecture": {{"kind": "mlp_bn", "dims": [2, 12, 2]}}}},
        "optim": {{
            "base": {{"kind": "sgd", "lr": 0.1, "momentum": 0.9, "weight_decay": 0.0005}},
            "schedule": {{"kind": "cosine"}},
            "perturb": {{"variant": "elem_l2", "rho": 0.5, "scope": {{"kind": "random", "sparsity": 0.5, "seed": 3}}}},
            "m": 8,
            "stage_switch": {{"epoch": 2, "from": "sgd", "to": "sam"}}
        }},
        "data": {{"kind": {{"type": "spirals", "n": 200, "noise": 0.05, "seed": 4}}}},
        "epochs": {epochs},
        "batch_size": 16,
        "seed": 9,
        "wall_clock": false
    }}"#
    ))
    .unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train(&config(4), a.path(), &TrainOptions::default()).unwrap();
    train(&config(4), b.path(), &TrainOptions::default()).unwrap();
    assert_eq!(read(&a.path().join("metrics.csv")), read(&b.path().join("metrics.csv")));
    assert_eq!(read(&a.path().join("checkpoint.json")), read(&b.path().join("checkpoint.json")));
}

#[test]
fn split_run_matches_unsplit_run() {
    let whole = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let cfg = config(6);
    train(&cfg, whole.path(), &TrainOptions::default()).unwrap();
    let first = train(
        &cfg,
        split.path(),
        &TrainOptions {
            resume: None,
            stop_after: Some(3),
        },
    )
    .unwrap();
    assert_eq!(first.progress.epoch, 3);
    train(
        &cfg,
        split.path(),
        &TrainOptions {
            resume: Some(first.checkpoint),
            stop_after: None,
        },
    )
    .unwrap();
    assert_eq!(read(&whole.path().join("metrics.csv")), read(&split.path().join("metrics.csv")));
    assert_eq!(read(&whole.path().join("checkpoint.json")), read(&split.path().join("checkpoint.json")));
}

#[test]
fn resume_rejects_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(
        &config(4),
        dir.path(),
        &TrainOptions {
            resume: None,
            stop_after: Some(1),
        },
    )
    .unwrap();
    let mut other = config(4);
    other.seed = 10;
    let err = train(
        &other,
        dir.path(),
        &TrainOptions {
            resume: Some(out.checkpoint),
            stop_after: None,
        },
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn checkpoint_save_load_save_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&config(2), dir.path(), &TrainOptions::default()).unwrap();
    let ckpt = Checkpoint::load(&out.checkpoint).unwrap();
    let again = dir.path().join("again.json");
    ckpt.save(&again).unwrap();
    assert_eq!(read(&out.checkpoint), read(&again));
    let model = ckpt.model().unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&model.params), bits(&out.model.params));
}

#[test]
fn blobs_sgd_fits_the_training_set() {
    let cfg = RunConfig::from_json(
        r#"{
        "model": {"architecture": {"kind": "mlp_bn", "dims": [8, 32, 3]}},
        "optim": {"base": {"kind": "sgd", "lr": 0.05, "momentum": 0.9}},
        "data": {"kind": {"type": "blobs", "classes": 3, "dim": 8, "n": 600, "noise": 0.5, "seed": 0}},
        "epochs": 30,
        "batch_size": 32,
        "wall_clock": false
    }"#,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, dir.path(), &TrainOptions::default()).unwrap();
    assert!(out.rows.last().unwrap().train_acc > 0.95);
}

fn idx(dims: &[u32], data: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, dims.len() as u8];
    for d in dims {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(data);
    b
}

#[test]
fn idx_fixture_round_trips_through_standardization() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = vec![0, 10, 20, 30, 255, 128, 64, 32, 7, 7, 7, 7, 1, 2, 3, 4];
    let images = dir.path().join("images.idx");
    let labels = dir.path().join("labels.idx");
    std::fs::write(&images, idx(&[4, 2, 2], &pixels)).unwrap();
    std::fs::write(&labels, idx(&[4], &[0, 1, 1, 0])).unwrap();
    let spec = DatasetSpec {
        kind: DataKind::IdxFiles {
            images_path: images.clone(),
            labels_path: labels.clone(),
            take_n: None,
        },
        split: 0.5,
    };
    let split = load_dataset(&spec).unwrap();
    let train_px = split.standardizer.invert(&split.train.x).unwrap();
    let test_px = split.standardizer.invert(&split.test.x).unwrap();
    let restored: Vec<f64> = train_px.data().iter().chain(test_px.data()).copied().collect();
    for (r, p) in restored.iter().zip(&pixels) {
        assert!((r - f64::from(*p)).abs() < 1e-9);
    }
    assert_eq!(split.train.y, vec![0, 1]);
    assert_eq!(split.test.y, vec![1, 0]);

    let too_many = DatasetSpec {
        kind: DataKind::IdxFiles {
            images_path: images,
            labels_path: labels.clone(),
            take_n: Some(5),
        },
        split: 0.5,
    };
    assert!(load_dataset(&too_many).is_err());
    std::fs::write(&labels, [0, 0, 8, 1, 0, 0]).unwrap();
    let err = load_dataset(&spec).unwrap_err().to_string();
    assert!(err.contains("offset 4"), "{err}");
}
