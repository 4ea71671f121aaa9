use std::path::Path;

use dmad_core::learner::train::epoch_means;
use dmad_core::learner::{hinge_loss, train, LossConfig, TrainSetup, TrainingData};
use dmad_core::memory_bank::Mode;
use dmad_core::pipeline::{self, RunConfig};
use dmad_core::synth::{self, ImagesPerObject, SynthSpec};
use ndarray::Array2;

const C: usize = 8;

fn dataset(dir: &Path, seen: usize) {
    let spec = SynthSpec {
        num_objects: 2,
        images_per_object: ImagesPerObject {
            train_normal: 16,
            test_normal: 2,
            test_anomalous: 2,
            seen_anomalies: seen,
        },
        c: C,
        outlier_images: 4,
        ..SynthSpec::default()
    };
    synth::generate(&spec, dir).unwrap();
}

fn prepared(dir: &Path, mode: Mode) -> (RunConfig, TrainingData, TrainSetup) {
    let mut cfg = RunConfig::for_mode(mode);
    cfg.paths.rebase(dir);
    cfg.train.epochs = 6;
    cfg.train.batch_size = 4;
    cfg.augment.noise_std = 0.1;
    pipeline::build_banks(&cfg).unwrap();
    let dual = pipeline::load_banks(&cfg).unwrap();
    let data = pipeline::training_data(&cfg, &dual).unwrap();
    let setup = TrainSetup {
        knowledge: cfg.knowledge,
        loss: cfg.loss,
        augment: cfg.augment,
        train: cfg.train,
        optimizer: cfg.optimizer,
    };
    (cfg, data, setup)
}

#[test]
fn anomaly_weight_enters_linearly() {
    let psi_n = [0.7, 0.1, -0.2];
    let psi_p = [0.3, -0.9];
    let psi_a = [0.0, -0.6, 0.4];
    let at = |l2: f64| {
        let cfg = LossConfig {
            lambda2: l2,
            ..LossConfig::semi_supervised()
        };
        hinge_loss(&psi_n, &psi_p, Some(&psi_a), &cfg).unwrap()
    };
    let (a, b) = (at(15.0), at(30.0));
    assert!((b.total - a.total - 15.0 * a.term_a).abs() < 1e-12);
    assert_eq!(a.term_a, b.term_a);
    // hinge on the anomalous set by hand: max(0, 0.5 + psi)
    assert!((a.term_a - (0.5 + 0.0 + 0.9) / 3.0).abs() < 1e-15);
}

#[test]
fn anomaly_weight_scales_its_gradient_linearly() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 2);
    let (cfg, data, _) = prepared(dir.path(), Mode::SemiSupervised);
    let params = dmad_core::learner::ModelParams::init(C, cfg.knowledge, 2, false, 1);
    let normal = &data.normal[..3];
    let anomalous = &data.anomalous[..2];
    let rows: usize = normal.iter().map(|s| s.len()).sum();
    let noise = Array2::from_shape_fn((rows, 3 * C), |(i, j)| {
        ((i * 31 + j * 7) % 13) as f64 * 0.01
    });
    let grads = |l2: f64| {
        let lc = LossConfig {
            lambda2: l2,
            ..cfg.loss
        };
        let out = params
            .forward_backward(normal, anomalous, noise.view(), &lc)
            .unwrap();
        out.grads
            .slices()
            .into_iter()
            .flat_map(|(_, s)| s.to_vec())
            .collect::<Vec<f64>>()
    };
    let (g5, g10, g15) = (grads(5.0), grads(10.0), grads(15.0));
    let scale = g10.iter().map(|v| v.abs()).fold(0.0, f64::max);
    for i in 0..g5.len() {
        let second_diff = g15[i] - 2.0 * g10[i] + g5[i];
        assert!(
            second_diff.abs() <= 1e-9 * scale.max(1.0),
            "tensor entry {i}: {second_diff}"
        );
    }
}

#[test]
fn training_lowers_the_loss_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 0);
    let (_, data, setup) = prepared(dir.path(), Mode::Unsupervised);
    let (ckpt, log) = train(&data, C, &setup).unwrap();
    let means = epoch_means(&log);
    assert_eq!(means.len(), 6);
    assert!(means.last().unwrap() < means.first().unwrap(), "{means:?}");

    let (again, log2) = train(&data, C, &setup).unwrap();
    assert_eq!(ckpt.encode().unwrap(), again.encode().unwrap());
    assert_eq!(log, log2);
}

#[test]
fn semi_training_needs_anomalous_patches() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 1);
    let (_, mut data, setup) = prepared(dir.path(), Mode::SemiSupervised);
    data.anomalous.clear();
    let err = train(&data, C, &setup).unwrap_err();
    assert!(matches!(err, dmad_core::Error::Validation(_)), "{err}");
}
