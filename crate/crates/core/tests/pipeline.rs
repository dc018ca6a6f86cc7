use std::fs;
use std::path::Path;

use apnorm::data::{load_mnist, synthetic_blobs};
use apnorm::error::Error;
use apnorm::layers::{analytic_stats, introduce_normalization, load_model, mlp, save_model, Activation, InitMode, NormMode, WeightInit};
use apnorm::optim::{evaluate, prepare, train, InitProtocol, TrainConfig};
use proptest::prelude::*;

#[test]
fn train_save_reload_evaluate() {
    let data = synthetic_blobs(1024, 3, 6, 6.0, 2).unwrap();
    let held_out = synthetic_blobs(256, 3, 6, 6.0, 3).unwrap();
    let cfg = TrainConfig { batch_size: 32, lr0: 3e-3, epochs: 3, norm: NormMode::Ap2, init: InitProtocol::Ap2, ..Default::default() };
    let base = mlp(vec![6], &[16, 16], 3, Activation::Sigmoid, WeightInit::Normal, 0).unwrap();
    let net = prepare(&base, &data, &cfg).unwrap();
    let outcome = train(&net, &data, Some(&held_out), &cfg).unwrap();
    assert_eq!(outcome.validation.len(), 3);
    assert!(outcome.validation.last().unwrap().val_accuracy > 0.9);

    let dir = tempfile::tempdir().unwrap();
    save_model(&outcome.net, dir.path()).unwrap();
    let reloaded = load_model(dir.path()).unwrap();
    assert_eq!(reloaded, outcome.net);
    assert_eq!(evaluate(&reloaded, &held_out, 64, false).unwrap(), evaluate(&outcome.net, &held_out, 64, false).unwrap());
}

fn saved_model(dir: &Path) {
    let net = mlp(vec![4], &[5], 2, Activation::Relu, WeightInit::Normal, 0).unwrap();
    save_model(&introduce_normalization(&net, NormMode::Wn, InitMode::Projecting, None, 0).unwrap(), dir).unwrap();
}

#[test]
fn corrupted_model_directories_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    saved_model(d);
    fs::write(d.join("p0_weight.f32"), [0u8; 7]).unwrap();
    assert!(matches!(load_model(d), Err(Error::Model { .. })));

    saved_model(d);
    let manifest = fs::read_to_string(d.join("manifest.txt")).unwrap();
    fs::write(d.join("manifest.txt"), manifest.replace("linear", "bilinear")).unwrap();
    assert!(matches!(load_model(d), Err(Error::Model { detail, .. }) if detail.contains("bilinear")));

    saved_model(d);
    fs::remove_file(d.join("input_mean.f64")).unwrap();
    assert!(matches!(load_model(d), Err(Error::Io { .. })));
}

#[test]
fn bundled_mnist_subset_loads() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist10k");
    let ds = load_mnist(&dir.join("train-images-idx3-ubyte.gz"), &dir.join("train-labels-idx1-ubyte.gz")).unwrap();
    assert_eq!(ds.len(), 10_000);
    assert_eq!(ds.example_shape(), &[1, 28, 28]);
    assert_eq!(ds.classes, 10);
    assert!(ds.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let first = ds.take(10).unwrap();
    assert_eq!(first.labels, (0..10).collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn projecting_ap2_feeds_unit_statistics(widths in prop::collection::vec(1usize..12, 1..4), seed in 0u64..1000) {
        let net = mlp(vec![5], &widths, 3, Activation::Sigmoid, WeightInit::Normal, seed).unwrap();
        let ap2 = introduce_normalization(&net, NormMode::Ap2, InitMode::Projecting, None, seed).unwrap();
        let stats = analytic_stats(&ap2).unwrap();
        for i in ap2.norm_indices() {
            let s = &stats.layers[i];
            prop_assert!(s.mean.iter().all(|&m| m == 0.0));
            prop_assert!(s.var.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn save_load_is_exact(widths in prop::collection::vec(1usize..10, 0..3), seed in 0u64..1000, mode in 0usize..4) {
        let net = mlp(vec![3], &widths, 2, Activation::LeakyRelu(0.1), WeightInit::Orthonormal, seed).unwrap();
        let net = match mode {
            0 => net,
            1 => introduce_normalization(&net, NormMode::Ap2, InitMode::ProjectingRandomScale, None, seed).unwrap(),
            2 => introduce_normalization(&net, NormMode::Wn, InitMode::Equivalence, None, seed).unwrap(),
            _ => introduce_normalization(&net, NormMode::Ap2, InitMode::Equivalence, None, seed).unwrap(),
        };
        let dir = tempfile::tempdir().unwrap();
        save_model(&net, dir.path()).unwrap();
        prop_assert_eq!(load_model(dir.path()).unwrap(), net);
    }
}
