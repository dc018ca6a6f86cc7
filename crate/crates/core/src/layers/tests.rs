use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::moments::sigmoid;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(shape: Vec<usize>, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(r);
        z as f32
    })
}

fn uniform(shape: Vec<usize>, lo: f32, hi: f32, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// dim → 8 → 6 → 3 sigmoid MLP with nonzero biases.
fn small_mlp(dim: usize, seed: u64) -> NetworkSpec {
    let mut net = mlp(vec![dim], &[8, 6], 3, Activation::Sigmoid, WeightInit::Normal, seed).unwrap();
    let mut r = rng(seed + 1);
    for layer in &mut net.layers {
        if let LayerSpec::Linear { bias, .. } = layer {
            *bias = uniform(bias.shape().to_vec(), -0.5, 0.5, &mut r);
        }
    }
    net
}

fn small_cnn(seed: u64) -> NetworkSpec {
    let mut r = rng(seed);
    let conv = |o: usize, i: usize, k: usize, stride: usize, r: &mut ChaCha8Rng| LayerSpec::Conv {
        weight: gaussian(vec![o, i, k, k], r).scale(0.4),
        bias: uniform(vec![o], -0.2, 0.2, r),
        stride,
        pad: k / 2,
    };
    let layers = vec![
        conv(4, 2, 3, 1, &mut r),
        LayerSpec::Activation(Activation::LeakyRelu(0.03)),
        conv(5, 4, 3, 2, &mut r),
        LayerSpec::Activation(Activation::LeakyRelu(0.03)),
        conv(3, 5, 1, 1, &mut r),
        LayerSpec::GlobalAvgPool,
        LayerSpec::Activation(Activation::LogSoftmax),
    ];
    NetworkSpec::new(vec![2, 6, 6], layers, MomentPair::standard(2)).unwrap()
}

fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b).unwrap()
}

#[test]
fn identity_norm_passes_input_through() {
    let net = NetworkSpec::new(vec![3], vec![LayerSpec::norm(NormMode::None, 3)], MomentPair::standard(3)).unwrap();
    let x = gaussian(vec![5, 3], &mut rng(1));
    for training in [true, false] {
        assert_eq!(net.forward(&x, training).unwrap(), x);
    }
}

#[test]
fn ap2_standardizes_a_linear_layer() {
    let mut r = rng(2);
    let layers =
        vec![LayerSpec::linear(gaussian(vec![4, 6], &mut r), uniform(vec![4], -1.0, 1.0, &mut r)), LayerSpec::norm(NormMode::Ap2, 4)];
    let net = NetworkSpec::new(vec![6], layers, MomentPair::standard(6)).unwrap();
    let n = 10_000;
    let y = net.forward(&gaussian(vec![n, 6], &mut r), true).unwrap().to_f64();
    let tol = 5.0 / (n as f64).sqrt();
    for u in 0..4 {
        let col: Vec<f64> = (0..n).map(|i| y[i * 4 + u]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < tol && (var - 1.0).abs() < tol, "unit {u}: {mean} {var}");
    }
}

#[test]
fn mlp_forward_matches_straight_line_oracle() {
    let net = small_mlp(5, 3);
    let x = uniform(vec![4, 5], -1.0, 1.0, &mut rng(4));
    let out = net.forward(&x, false).unwrap().to_f64();
    let mut expect = Vec::new();
    for row in x.to_f64().chunks(5) {
        let mut h = row.to_vec();
        let linears: Vec<_> = net.layers.iter().filter_map(|l| l.weight_bias()).collect();
        for (k, (w, b)) in linears.iter().enumerate() {
            let (o, i) = (w.shape()[0], w.shape()[1]);
            let (w, b) = (w.to_f64(), b.to_f64());
            let z: Vec<f64> = (0..o).map(|r| b[r] + (0..i).map(|c| w[r * i + c] * h[c]).sum::<f64>()).collect();
            h = if k + 1 < linears.len() {
                z.iter().map(|&v| sigmoid(v)).collect()
            } else {
                let m = z.iter().cloned().fold(f64::MIN, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                z.iter().map(|v| v - lse).collect()
            };
        }
        expect.extend(h);
    }
    for (a, e) in out.iter().zip(&expect) {
        assert!((a - e).abs() < 1e-5, "{a} vs {e}");
    }
}

#[test]
fn nan_in_activations_names_the_layer() {
    let layers = vec![LayerSpec::linear(Tensor::zeros(vec![2, 3]), Tensor::zeros(vec![2])), LayerSpec::norm(NormMode::Wn, 2)];
    let mut net = NetworkSpec::new(vec![3], layers, MomentPair::standard(3)).unwrap();
    net.norm_state_mut(1).unwrap().eps = 0.0;
    let err = net.forward(&Tensor::full(vec![1, 3], 1.0), false).unwrap_err();
    assert!(err.is_numerical());
    assert!(err.to_string().contains("layer 1 (norm)"), "{err}");
}

#[test]
fn forward_rejects_wrong_batch_shape() {
    let net = small_mlp(3, 5);
    assert!(net.forward(&Tensor::zeros(vec![2, 4]), false).is_err());
}

#[test]
fn orthonormal_rows_keep_unit_statistics() {
    let net = mnist_mlp(WeightInit::Orthonormal, 6).unwrap();
    let stats = analytic_stats(&net).unwrap();
    let first = &stats.layers[1];
    for u in 0..first.len() {
        assert!(first.mean[u].abs() < 1e-6 && (first.var[u] - 1.0).abs() < 1e-6);
    }
}

#[test]
fn conv_collapse_sums_the_filter_before_squaring() {
    let layers = vec![LayerSpec::Conv { weight: Tensor::full(vec![1, 1, 3, 3], 1.0), bias: Tensor::zeros(vec![1]), stride: 1, pad: 0 }];
    let net = NetworkSpec::new(vec![1, 5, 5], layers, MomentPair::standard(1)).unwrap();
    let stats = analytic_stats(&net).unwrap();
    assert_eq!(stats.layers[0].mean, vec![0.0]);
    assert_eq!(stats.layers[0].var, vec![81.0]);
}

#[test]
fn statistics_after_a_unit_norm_are_standard() {
    let net = introduce_normalization(&small_mlp(4, 7), NormMode::Ap2, InitMode::Projecting, None, 0).unwrap();
    let stats = analytic_stats(&net).unwrap();
    for i in net.norm_indices() {
        let s = &stats.layers[i];
        assert!(s.mean.iter().all(|&m| m == 0.0) && s.var.iter().all(|&v| v == 1.0));
    }
}

#[test]
fn analytic_stats_rejects_inner_log_softmax() {
    let layers = vec![LayerSpec::Activation(Activation::LogSoftmax), LayerSpec::Activation(Activation::Sigmoid)];
    let net = NetworkSpec::new(vec![3], layers, MomentPair::standard(3)).unwrap();
    assert!(matches!(analytic_stats(&net), Err(Error::UnsupportedLayer { index: 0, .. })));
}

#[test]
fn estimator_examples() {
    // BN on a constant batch
    let layers = vec![LayerSpec::linear(Tensor::full(vec![2, 2], 1.0), Tensor::zeros(vec![2])), LayerSpec::norm(NormMode::Bn, 2)];
    let net = NetworkSpec::new(vec![2], layers, MomentPair::standard(2)).unwrap();
    let est = net.estimate_norm_stats(1, Some(&Tensor::full(vec![8, 2], 1.5))).unwrap();
    assert_eq!(est.mu, vec![3.0, 3.0]);
    assert!(est.sigma.iter().all(|&s| (s - DEFAULT_EPS.sqrt()).abs() < 1e-12));
    assert!(matches!(net.estimate_norm_stats(1, None), Err(Error::MissingRunningStats { index: 1 })));
    assert!(matches!(net.forward(&Tensor::full(vec![8, 2], 1.5), false), Err(Error::MissingRunningStats { index: 1 })));

    // WN on the row (3, 4)
    let layers =
        vec![LayerSpec::linear(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap(), Tensor::zeros(vec![1])), LayerSpec::norm(NormMode::Wn, 1)];
    let net = NetworkSpec::new(vec![2], layers, MomentPair::standard(2)).unwrap();
    let est = net.estimate_norm_stats(1, None).unwrap();
    assert_eq!(est.mu, vec![0.0]);
    assert!((est.sigma[0] - 5.0).abs() < 1e-6);

    // AP2 on the MLP preset with orthonormal weights: unit pre-norm variance
    let net =
        introduce_normalization(&mnist_mlp(WeightInit::Orthonormal, 8).unwrap(), NormMode::Ap2, InitMode::Projecting, None, 0).unwrap();
    let est = net.estimate_norm_stats(2, None).unwrap();
    for s in est.sigma {
        assert!((s * s - DEFAULT_EPS - 1.0).abs() < 1e-6);
    }
}

#[test]
fn bn_running_statistics_follow_the_momentum_rule() {
    let layers = vec![LayerSpec::linear(Tensor::full(vec![1, 1], 1.0), Tensor::zeros(vec![1])), LayerSpec::norm(NormMode::Bn, 1)];
    let mut net = NetworkSpec::new(vec![1], layers, MomentPair::standard(1)).unwrap();
    let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
    let fwd = forward_tape(&net, &net.param_values(), &x, ForwardOptions::default()).unwrap();
    net.apply_norm_records(&fwd.norm_records).unwrap();
    let s = net.norm_state(1).unwrap();
    assert_eq!(s.running_updates, 1);
    assert!((f64::from(s.running_mean.data()[0]) - 0.3).abs() < 1e-6);
    // unbiased batch variance 14/3
    assert!((f64::from(s.running_var.data()[0]) - (0.9 + 0.1 * 14.0 / 3.0)).abs() < 1e-6);
    assert!(net.forward(&x, false).is_ok());
}

#[test]
fn equivalence_introduction_preserves_outputs() {
    let base = small_mlp(6, 9);
    let mut r = rng(10);
    let stat_batch = gaussian(vec![32, 6], &mut r);
    for mode in [NormMode::Ap2, NormMode::Wn, NormMode::Bn] {
        let net = introduce_normalization(&base, mode, InitMode::Equivalence, Some(&stat_batch), 0).unwrap();
        assert_eq!(net.norm_indices().len(), 3);
        let probes: Vec<Tensor> =
            if mode == NormMode::Bn { vec![stat_batch.clone()] } else { (0..3).map(|_| gaussian(vec![16, 6], &mut r)).collect() };
        for x in probes {
            let d = max_abs(&base.forward(&x, true).unwrap(), &net.forward(&x, true).unwrap());
            assert!(d < 1e-5, "{mode}: {d}");
        }
    }
    assert!(introduce_normalization(&base, NormMode::Bn, InitMode::Equivalence, None, 0).is_err());
    assert!(introduce_normalization(&base, NormMode::None, InitMode::Projecting, None, 0).is_err());
    let normed = introduce_normalization(&base, NormMode::Ap2, InitMode::Projecting, None, 0).unwrap();
    assert!(introduce_normalization(&normed, NormMode::Ap2, InitMode::Projecting, None, 0).is_err());
}

#[test]
fn projecting_ap2_gives_standard_pre_activation_stats() {
    let net = introduce_normalization(&mnist_mlp(WeightInit::Normal, 11).unwrap(), NormMode::Ap2, InitMode::Projecting, None, 0).unwrap();
    let stats = analytic_stats(&net).unwrap();
    let mut checked = 0;
    for (i, layer) in net.layers.iter().enumerate() {
        if layer == &LayerSpec::Activation(Activation::Sigmoid) {
            let s = stats.entering(i).unwrap();
            assert!(s.mean.iter().all(|&m| m == 0.0) && s.var.iter().all(|&v| v == 1.0));
            checked += 1;
        }
    }
    assert_eq!(checked, 6);
}

#[test]
fn bn_style_scales_are_uniform() {
    let net = introduce_normalization(&mnist_mlp(WeightInit::Normal, 12).unwrap(), NormMode::Bn, InitMode::ProjectingRandomScale, None, 3)
        .unwrap();
    let scales: Vec<f32> = net.norm_indices().iter().flat_map(|&i| net.norm_state(i).unwrap().scale.data().to_vec()).collect();
    assert!(scales.iter().all(|&s| (0.0..1.0).contains(&s)));
    assert!(scales.iter().any(|&s| s != scales[0]));
}

#[test]
fn strip_round_trips() {
    let base = small_mlp(6, 13);
    let mut r = rng(14);
    let batch = gaussian(vec![32, 6], &mut r);
    for mode in [NormMode::Ap2, NormMode::Wn, NormMode::Bn] {
        let net = introduce_normalization(&base, mode, InitMode::Equivalence, Some(&batch), 0).unwrap();
        let back = strip_normalization(&net, Some(&batch)).unwrap();
        for (a, b) in base.param_values().iter().zip(back.param_values()) {
            let d = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(d < 1e-6, "{mode}: {d}");
        }
    }
    for mode in [NormMode::Ap2, NormMode::Wn] {
        let net = introduce_normalization(&base, mode, InitMode::Projecting, None, 0).unwrap();
        let flat = strip_normalization(&net, None).unwrap();
        assert!(!flat.has_norm());
        for _ in 0..3 {
            let x = gaussian(vec![16, 6], &mut r);
            assert!(max_abs(&net.forward(&x, true).unwrap(), &flat.forward(&x, true).unwrap()) < 1e-5);
        }
    }
    let net = introduce_normalization(&base, NormMode::Bn, InitMode::ProjectingRandomScale, None, 0).unwrap();
    assert!(strip_normalization(&net, None).is_err());
    let flat = strip_normalization(&net, Some(&batch)).unwrap();
    assert!(max_abs(&net.forward(&batch, true).unwrap(), &flat.forward(&batch, true).unwrap()) < 1e-5);
}

#[test]
fn strip_needs_a_parameterized_predecessor() {
    let layers = vec![LayerSpec::Activation(Activation::Sigmoid), LayerSpec::norm(NormMode::Ap2, 3)];
    let net = NetworkSpec::new(vec![3], layers, MomentPair::standard(3)).unwrap();
    assert!(matches!(strip_normalization(&net, None), Err(Error::Layer { index: 1, .. })));
}

#[test]
fn presets_compose() {
    let m = mnist_mlp(WeightInit::Normal, 0).unwrap();
    assert_eq!(m.param_count(), 784 * 20 + 20 + 5 * (20 * 20 + 20) + 20 * 10 + 10);
    assert_eq!(m.output_shape().unwrap(), vec![10]);
    let c = cifar_cnn(WeightInit::Normal, 0).unwrap();
    assert_eq!(CIFAR_STRIDES.iter().product::<usize>(), 4);
    let shapes = c.layer_shapes().unwrap();
    let last_conv = c.layers.iter().rposition(|l| matches!(l, LayerSpec::Conv { .. })).unwrap();
    assert_eq!(shapes[last_conv], vec![10, 8, 8]);
    assert_eq!(c.output_shape().unwrap(), vec![10]);
    let ortho = cifar_cnn(WeightInit::Orthonormal, 0).unwrap();
    ortho.layer_shapes().unwrap();
}

#[test]
fn bad_stacks_are_rejected() {
    let two_norms = vec![LayerSpec::norm(NormMode::Ap2, 2), LayerSpec::norm(NormMode::Ap2, 2)];
    assert!(NetworkSpec::new(vec![2], two_norms, MomentPair::standard(2)).is_err());
    let mismatch = vec![LayerSpec::linear(Tensor::zeros(vec![2, 3]), Tensor::zeros(vec![2]))];
    assert!(NetworkSpec::new(vec![4], mismatch, MomentPair::standard(4)).is_err());
    assert!(NetworkSpec::new(vec![4], vec![], MomentPair::standard(3)).is_err());
}

/// Normalized output of layer `norm_at` with eps set to zero.
fn normalized_output(net: &NetworkSpec, x: &Tensor, norm_at: usize) -> Vec<f64> {
    let fwd = forward_tape(net, &net.param_values(), x, ForwardOptions::default()).unwrap();
    fwd.tape.value(fwd.layer_outputs[norm_at]).to_vec()
}

fn exact_eps(mut net: NetworkSpec) -> NetworkSpec {
    for i in net.norm_indices() {
        net.norm_state_mut(i).unwrap().eps = 0.0;
    }
    net
}

#[test]
fn normalized_output_is_scale_and_bias_invariant() {
    let base = small_mlp(5, 15);
    let mut r = rng(16);
    let x = gaussian(vec![32, 5], &mut r);
    for mode in [NormMode::Ap2, NormMode::Bn, NormMode::Wn] {
        let net = exact_eps(introduce_normalization(&base, mode, InitMode::Projecting, None, 0).unwrap());
        let reference = normalized_output(&net, &x, 3);
        for alpha in [0.1f32, 2.0, 10.0] {
            let mut moved = net.clone();
            if let LayerSpec::Linear { weight, bias } = &mut moved.layers[2] {
                *weight = weight.scale(alpha);
                *bias = bias.map(|b| b * alpha + 0.7);
            }
            let out = normalized_output(&moved, &x, 3);
            let d = reference.iter().zip(&out).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d < 1e-5, "{mode} alpha {alpha}: {d}");
        }
    }
}

#[test]
fn batch_variance_equals_covariance_contraction() {
    let mut r = rng(17);
    let w = gaussian(vec![3, 4], &mut r);
    let layers = vec![LayerSpec::linear(w.clone(), Tensor::zeros(vec![3])), LayerSpec::norm(NormMode::Bn, 3)];
    let net = NetworkSpec::new(vec![4], layers, MomentPair::standard(4)).unwrap();
    let z = gaussian(vec![64, 4], &mut r).to_f64();
    let x = Tensor::from_f64(vec![64, 4], &z).unwrap();
    let est = net.estimate_norm_stats(1, Some(&x)).unwrap();
    let mean: Vec<f64> = (0..4).map(|j| (0..64).map(|i| z[i * 4 + j]).sum::<f64>() / 64.0).collect();
    let cov = |a: usize, b: usize| (0..64).map(|i| (z[i * 4 + a] - mean[a]) * (z[i * 4 + b] - mean[b])).sum::<f64>() / 64.0;
    let wv = w.to_f64();
    for o in 0..3 {
        let row = &wv[o * 4..(o + 1) * 4];
        let contraction: f64 = (0..4).flat_map(|a| (0..4).map(move |b| (a, b))).map(|(a, b)| row[a] * row[b] * cov(a, b)).sum();
        let var = est.sigma[o].powi(2) - DEFAULT_EPS;
        assert!((var - contraction).abs() < 1e-4, "{var} vs {contraction}");
    }
}

#[test]
fn ap2_statistics_decouple_between_blocks() {
    let net = introduce_normalization(&small_mlp(5, 18), NormMode::Ap2, InitMode::Projecting, None, 0).unwrap();
    let norms = net.norm_indices();
    let target = norms[1];
    let before = net.estimate_norm_stats(target, None).unwrap();
    let refs = net.param_refs();
    let own_block = [
        ParamRef { layer: target - 1, role: ParamRole::Weight },
        ParamRef { layer: norms[0], role: ParamRole::Scale },
        ParamRef { layer: norms[0], role: ParamRole::Shift },
    ];
    for r in refs {
        let mut moved = net.clone();
        moved.param_mut(r).unwrap().data_mut()[0] += 0.5;
        let after = moved.estimate_norm_stats(target, None).unwrap();
        if own_block.contains(&r) {
            assert_ne!(after, before, "{r}");
        } else if r != (ParamRef { layer: target - 1, role: ParamRole::Bias }) {
            assert_eq!(after.sigma, before.sigma, "{r}");
            assert_eq!(after.mu, before.mu, "{r}");
        }
    }
}

#[test]
fn train_and_eval_agree_without_batch_statistics() {
    let base = small_mlp(5, 19);
    let x = gaussian(vec![16, 5], &mut rng(20));
    for mode in [NormMode::Ap2, NormMode::Wn] {
        let net = introduce_normalization(&base, mode, InitMode::Projecting, None, 0).unwrap();
        assert_eq!(net.forward(&x, true).unwrap(), net.forward(&x, false).unwrap());
    }
    let mut bn = introduce_normalization(&base, NormMode::Bn, InitMode::Projecting, None, 0).unwrap();
    let fwd = forward_tape(&bn, &bn.param_values(), &x, ForwardOptions::default()).unwrap();
    bn.apply_norm_records(&fwd.norm_records).unwrap();
    assert_ne!(bn.forward(&x, true).unwrap(), bn.forward(&x, false).unwrap());
}

#[test]
fn cnn_stats_are_finite_and_tape_agrees() {
    let net = introduce_normalization(&small_cnn(21), NormMode::Ap2, InitMode::Projecting, None, 0).unwrap();
    let stats = analytic_stats(&net).unwrap();
    assert!(stats.layers.iter().all(|s| s.mean.iter().chain(&s.var).all(|v| v.is_finite())));
    let x = gaussian(vec![2, 2, 6, 6], &mut rng(22));
    let fwd = forward_tape(&net, &net.param_values(), &x, ForwardOptions::default()).unwrap();
    for rec in &fwd.norm_records {
        let est = net.estimate_norm_stats(rec.layer, None).unwrap();
        for (a, b) in rec.sigma.iter().zip(&est.sigma) {
            assert!((a - b).abs() <= 1e-12 * b.abs());
        }
    }
}

#[test]
fn parameter_values_round_trip() {
    let mut net = small_mlp(4, 23);
    let vals = net.param_values();
    net.set_param_values(&vals).unwrap();
    assert_eq!(net.param_values(), vals);
    assert!(net.set_param_values(&vals[1..]).is_err());
}

#[test]
fn model_directory_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut net = introduce_normalization(&small_cnn(24), NormMode::Bn, InitMode::ProjectingRandomScale, None, 1).unwrap();
    net.layers.insert(2, LayerSpec::Dropout { keep_prob: 0.8, scale: 1.25 });
    let x = gaussian(vec![3, 2, 6, 6], &mut rng(25));
    let fwd = forward_tape(&net, &net.param_values(), &x, ForwardOptions::default()).unwrap();
    net.apply_norm_records(&fwd.norm_records).unwrap();
    net.input_stats = MomentPair::new(vec![0.1, 1.0 / 3.0], vec![0.7, 2.0]).unwrap();
    save_model(&net, dir.path()).unwrap();
    let back = load_model(dir.path()).unwrap();
    assert_eq!(back, net);

    let mlp = introduce_normalization(&mnist_mlp(WeightInit::Normal, 26).unwrap(), NormMode::Ap2, InitMode::Projecting, None, 0).unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    save_model(&mlp, dir2.path()).unwrap();
    assert_eq!(load_model(dir2.path()).unwrap(), mlp);
}

#[test]
fn damaged_model_directories_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let net = small_mlp(4, 27);
    save_model(&net, dir.path()).unwrap();
    let weight = dir.path().join("p0_weight.f32");
    let bytes = std::fs::read(&weight).unwrap();
    std::fs::write(&weight, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(load_model(dir.path()), Err(Error::Model { .. })));
    std::fs::write(&weight, &bytes).unwrap();
    let manifest = dir.path().join("manifest.txt");
    let text = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(&manifest, text.replace("sigmoid", "tanh")).unwrap();
    let err = load_model(dir.path()).unwrap_err();
    assert!(err.to_string().contains("tanh"), "{err}");
    assert!(load_model(&dir.path().join("missing")).is_err());
}
