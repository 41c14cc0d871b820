use racnet_core::data::{LabeledDataset, Split};
use racnet_core::nn::io::{model_from_bytes, model_to_bytes, MODEL_VERSION};
use racnet_core::nn::{
    input_gradient, load_model, save_model, train, Layer, LayerSpec, LossSpec, LrSchedule, Network, Params,
    TrainConfig,
};
use racnet_core::tensor::softmax;
use racnet_core::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn layer(spec: LayerSpec, weight: Vec<f64>, bias: Vec<f64>) -> Layer {
    Layer {
        spec,
        params: Params {
            weight,
            bias,
            ..Params::default()
        },
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn small_cnn(seed: u64) -> Network {
    Network::init(
        vec![2, 6, 6],
        vec![
            LayerSpec::conv3x3(2, 4),
            LayerSpec::batch_norm(4),
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 2, stride: 2 },
            LayerSpec::conv3x3(4, 4),
            LayerSpec::batch_norm(4),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 36, outputs: 3 },
        ],
        seed,
    )
    .unwrap()
}

#[test]
fn zero_weight_dense_net_gives_uniform_softmax() {
    let net = Network::new(
        vec![5],
        vec![Layer::zeroed(LayerSpec::Dense { inputs: 5, outputs: 4 })],
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let logits = net.forward(&random_tensor(&[5], &mut rng)).unwrap();
        for p in softmax(logits.data()) {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }
}

#[test]
fn identity_1x1_conv_passes_input_through() {
    let conv = LayerSpec::Conv2d {
        in_channels: 1,
        out_channels: 1,
        kernel: 1,
        stride: 1,
        padding: 0,
    };
    let net = Network::new(vec![1, 2, 3], vec![layer(conv, vec![1.0], vec![0.0]), Layer::zeroed(LayerSpec::Flatten)])
        .unwrap();
    let x = Tensor::new(vec![1, 2, 3], vec![0.5, -1.0, 2.0, 3.5, 0.0, -7.25]).unwrap();
    assert_eq!(net.forward(&x).unwrap().data(), x.data());
}

#[test]
fn two_layer_dense_matches_matrix_oracle() {
    let w1 = vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.5];
    let b1 = vec![0.1, -0.2];
    let w2 = vec![1.0, -2.0, 0.5, 0.75, -1.25, 3.0];
    let b2 = vec![0.0, 0.3, -0.4];
    let net = Network::new(
        vec![3],
        vec![
            layer(LayerSpec::Dense { inputs: 3, outputs: 2 }, w1.clone(), b1.clone()),
            Layer::zeroed(LayerSpec::Relu),
            layer(LayerSpec::Dense { inputs: 2, outputs: 3 }, w2.clone(), b2.clone()),
        ],
    )
    .unwrap();
    let x = [0.3, -0.7, 1.1];
    let mut h = [0.0; 2];
    for o in 0..2 {
        h[o] = b1[o];
        for i in 0..3 {
            h[o] += w1[o * 3 + i] * x[i];
        }
        h[o] = h[o].max(0.0);
    }
    let mut z = [0.0; 3];
    for o in 0..3 {
        z[o] = b2[o];
        for i in 0..2 {
            z[o] += w2[o * 2 + i] * h[i];
        }
    }
    let logits = net.forward(&Tensor::from_vec(x.to_vec())).unwrap();
    for (a, b) in logits.data().iter().zip(&z) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
    }
}

#[test]
fn forward_rejects_wrong_shape() {
    let net = small_cnn(0);
    let err = net.forward(&Tensor::zeros(&[2, 5, 6])).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { .. }));
}

#[test]
fn tap_equals_relu_of_batch_norm_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let conv_w: Vec<f64> = (0..2 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let conv_b = vec![0.2, -0.1];
    let bn = Params {
        weight: vec![1.5, 0.5],
        bias: vec![-0.3, 0.4],
        running_mean: vec![0.1, -0.2],
        running_var: vec![2.0, 0.5],
    };
    let net = Network::new(
        vec![1, 3, 3],
        vec![
            layer(LayerSpec::conv3x3(1, 2), conv_w.clone(), conv_b.clone()),
            Layer {
                spec: LayerSpec::batch_norm(2),
                params: bn.clone(),
            },
            Layer::zeroed(LayerSpec::Relu),
            Layer::zeroed(LayerSpec::Flatten),
            layer(LayerSpec::Dense { inputs: 18, outputs: 2 }, vec![0.1; 36], vec![0.0; 2]),
        ],
    )
    .unwrap();
    let x = random_tensor(&[1, 3, 3], &mut rng);
    let (logits, taps) = net.forward_with_taps(&x, &[1]).unwrap();
    assert_eq!(logits, net.forward(&x).unwrap());
    let tap = &taps[&1];
    assert_eq!(tap.shape(), &[2, 3, 3]);
    for c in 0..2 {
        for i in 0..3i64 {
            for j in 0..3i64 {
                let mut s = conv_b[c];
                for di in -1..=1i64 {
                    for dj in -1..=1i64 {
                        let (y, xx) = (i + di, j + dj);
                        if (0..3).contains(&y) && (0..3).contains(&xx) {
                            s += conv_w[c * 9 + ((di + 1) * 3 + dj + 1) as usize] * x.data()[(y * 3 + xx) as usize];
                        }
                    }
                }
                let norm = (s - bn.running_mean[c]) / (bn.running_var[c] + 1e-5).sqrt();
                let expected = (bn.weight[c] * norm + bn.bias[c]).max(0.0);
                let got = tap.data()[c * 9 + (i * 3 + j) as usize];
                assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
            }
        }
    }
}

#[test]
fn empty_tap_set_behaves_like_forward() {
    let net = small_cnn(2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_tensor(&[2, 6, 6], &mut rng);
    let (logits, taps) = net.forward_with_taps(&x, &[]).unwrap();
    assert!(taps.is_empty());
    assert_eq!(logits, net.forward(&x).unwrap());
}

#[test]
fn taps_are_nonnegative_and_out_of_range_ids_fail() {
    let net = small_cnn(3);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (_, taps) = net.forward_with_taps(&random_tensor(&[2, 6, 6], &mut rng), &[1, 2]).unwrap();
    assert!(taps.values().all(|t| t.data().iter().all(|&v| v >= 0.0)));
    assert!(net.forward_with_taps(&random_tensor(&[2, 6, 6], &mut rng), &[7]).is_err());
}

fn separable_points(n: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    while ys.len() < n {
        let (a, b): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let side = a + 0.5 * b;
        if side.abs() < 0.1 {
            continue;
        }
        xs.extend([a, b]);
        ys.push(usize::from(side > 0.0));
    }
    LabeledDataset::new(vec![2], 2, xs, ys, Split::Train).unwrap()
}

fn point_net(seed: u64) -> Network {
    Network::init(
        vec![2],
        vec![
            LayerSpec::Dense { inputs: 2, outputs: 8 },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 8, outputs: 2 },
        ],
        seed,
    )
    .unwrap()
}

#[test]
fn separable_points_are_learned() {
    let data = separable_points(400, 5);
    let cfg = TrainConfig {
        learning_rate: 0.1,
        epochs: 50,
        batch_size: 16,
        weight_decay: 0.0,
        schedule: LrSchedule::Constant,
        ..TrainConfig::default()
    };
    let (net, report) = train(point_net(1), &data, &cfg).unwrap();
    let correct = (0..data.len())
        .filter(|&i| net.forward(&data.input_tensor(i)).unwrap().argmax() == data.label(i))
        .count();
    assert!(correct as f64 / data.len() as f64 >= 0.99, "{correct}/400");
    assert!(report.final_loss() < report.initial_loss);
}

#[test]
fn zero_epochs_returns_initialization() {
    let data = separable_points(50, 6);
    let init = point_net(2);
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let (net, report) = train(init.clone(), &data, &cfg).unwrap();
    assert_eq!(net, init);
    assert!(report.epochs.is_empty());
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = separable_points(120, 7);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        seed: 11,
        ..TrainConfig::default()
    };
    let (a, _) = train(point_net(3), &data, &cfg).unwrap();
    let (b, _) = train(point_net(3), &data, &cfg).unwrap();
    assert_eq!(model_to_bytes(&a).unwrap(), model_to_bytes(&b).unwrap());
    let (c, _) = train(point_net(3), &data, &TrainConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn conv_training_reduces_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 60;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..n {
        let y = i % 3;
        for c in 0..2 {
            for p in 0..36 {
                let bright = (p % 6 == y * 2) as u8 as f64 * (c + 1) as f64;
                xs.push(bright + 0.1 * rng.random_range(-1.0..1.0));
            }
        }
        ys.push(y);
    }
    let data = LabeledDataset::new(vec![2, 6, 6], 3, xs, ys, Split::Train).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 10,
        learning_rate: 0.02,
        ..TrainConfig::default()
    };
    let (_, report) = train(small_cnn(4), &data, &cfg).unwrap();
    assert!(report.final_loss() < report.initial_loss);
}

#[test]
fn constant_loss_has_zero_gradient() {
    let net = small_cnn(5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (v, g) = input_gradient(&net, &random_tensor(&[2, 6, 6], &mut rng), &LossSpec::Constant(4.5)).unwrap();
    assert_eq!(v, 4.5);
    assert!(g.data().iter().all(|&d| d == 0.0));
}

#[test]
fn linear_neuron_gradient_is_its_weight() {
    let w = vec![0.5, -1.5, 2.0, 0.25, 1.0, -3.0];
    let net = Network::new(
        vec![3],
        vec![layer(LayerSpec::Dense { inputs: 3, outputs: 2 }, w.clone(), vec![0.7, -0.1])],
    )
    .unwrap();
    let x = Tensor::from_vec(vec![0.2, 0.4, -0.9]);
    let (_, g) = input_gradient(&net, &x, &LossSpec::Logit(1)).unwrap();
    assert_eq!(g.data(), &w[3..]);
}

#[test]
fn cnn_input_gradient_matches_central_differences() {
    let step = 1e-3;
    for seed in 0..5 {
        let net = small_cnn(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let x = random_tensor(&[2, 6, 6], &mut rng);
        for loss in [LossSpec::CrossEntropy(1), LossSpec::LinearLogits(vec![0.3, -1.0, 0.5])] {
            let (_, g) = input_gradient(&net, &x, &loss).unwrap();
            let mut worst: f64 = 0.0;
            for i in 0..x.len() {
                let mut p = x.clone();
                p.data_mut()[i] += step;
                let mut m = x.clone();
                m.data_mut()[i] -= step;
                let fp = loss.evaluate(&net.forward(&p).unwrap()).unwrap().0;
                let fm = loss.evaluate(&net.forward(&m).unwrap()).unwrap().0;
                let numeric = (fp - fm) / (2.0 * step);
                let a = g.data()[i];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2));
            }
            assert!(worst <= 1e-3, "seed {seed} {loss:?}: {worst:e}");
        }
    }
}

#[test]
fn model_round_trip_is_bit_exact() {
    let data = separable_points(60, 8);
    let (net, _) = train(point_net(9), &data, &TrainConfig { epochs: 2, ..TrainConfig::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    save_model(&net, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back, net);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let x = random_tensor(&[2], &mut rng);
        let (a, b) = (net.forward(&x).unwrap(), back.forward(&x).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    let cnn = small_cnn(6);
    assert_eq!(model_from_bytes(&model_to_bytes(&cnn).unwrap()).unwrap(), cnn);
}

#[test]
fn truncated_or_tampered_model_is_corrupt() {
    let bytes = model_to_bytes(&small_cnn(7)).unwrap();
    for cut in [0, 1, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(model_from_bytes(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
    }
    let text = String::from_utf8(bytes.clone()).unwrap();
    let pos = text.find("\"weight\":[").unwrap() + 10;
    let mut tampered = text.into_bytes();
    tampered[pos] = if tampered[pos] == b'1' { b'2' } else { b'1' };
    assert!(matches!(model_from_bytes(&tampered), Err(Error::Corrupt(_))));
}

#[test]
fn other_versions_are_rejected() {
    let text = String::from_utf8(model_to_bytes(&small_cnn(8)).unwrap()).unwrap();
    let other = text.replacen(
        &format!("\"version\":{MODEL_VERSION}"),
        &format!("\"version\":{}", MODEL_VERSION + 1),
        1,
    );
    assert!(matches!(
        model_from_bytes(other.as_bytes()),
        Err(Error::Version { found, .. }) if found == MODEL_VERSION + 1
    ));
}

#[test]
fn networks_without_layers_are_rejected() {
    assert!(matches!(Network::new(vec![3], vec![]), Err(Error::InvalidNetwork(_))));
    let json = r#"{"input_shape":[3],"num_classes":2,"layers":[]}"#;
    assert!(serde_json::from_str::<Network>(json).is_err());
}

#[test]
fn one_class_networks_are_rejected() {
    let err = Network::new(vec![3], vec![Layer::zeroed(LayerSpec::Dense { inputs: 3, outputs: 1 })]);
    assert!(err.is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn forward_shapes_agree_with_static_inference(
        channels in 1usize..4,
        size in 4usize..9,
        width in 1usize..5,
        pool in prop::bool::ANY,
        seed in 0u64..1000,
    ) {
        let mut specs = vec![LayerSpec::conv3x3(channels, width), LayerSpec::batch_norm(width), LayerSpec::Relu];
        let mut side = size;
        if pool {
            specs.push(LayerSpec::MaxPool { kernel: 2, stride: 2 });
            side /= 2;
        }
        specs.push(LayerSpec::Flatten);
        specs.push(LayerSpec::Dense { inputs: width * side * side, outputs: 3 });
        let net = Network::init(vec![channels, size, size], specs, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&[channels, size, size], &mut rng);
        let outs = net.layer_outputs(&x).unwrap();
        let shapes = net.output_shapes();
        prop_assert_eq!(outs.len(), shapes.len());
        for (o, s) in outs.iter().zip(&shapes) {
            prop_assert_eq!(o.shape(), s.as_slice());
            prop_assert!(o.is_finite());
        }
        let p = softmax(net.forward(&x).unwrap().data());
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn softmax_sums_to_one(logits in prop::collection::vec(-50.0f64..50.0, 2..20)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
