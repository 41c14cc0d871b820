use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use racnet_core::data::{LabeledDataset, Split};
use racnet_core::lrp::{
    feature_map_relevance, relevance_at_layer, relevance_at_layers, relevance_score_matrix, LrpParams,
};
use racnet_core::nn::{Layer, LayerSpec, Network, Params};
use racnet_core::{Error, Tensor};

const EXACT: LrpParams = LrpParams {
    alpha: 2.0,
    beta: 1.0,
    stabilizer_eps: 0.0,
};

fn layer(spec: LayerSpec, weight: Vec<f64>, bias: Vec<f64>) -> Layer {
    Layer {
        spec,
        params: Params {
            weight,
            bias,
            ..Default::default()
        },
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Textbook alpha-beta step written with explicit loops over a weight matrix
/// `w[q][p]`, with bias pools and empty pools contributing nothing.
fn oracle_step(a: &[f64], w: &[Vec<f64>], b: &[f64], upper: &[f64], alpha: f64, beta: f64) -> Vec<f64> {
    let mut r = vec![0.0; a.len()];
    for q in 0..w.len() {
        let mut zp = b[q].max(0.0);
        let mut zn = b[q].min(0.0);
        for p in 0..a.len() {
            let z = a[p] * w[q][p];
            if z > 0.0 {
                zp += z;
            } else {
                zn += z;
            }
        }
        for p in 0..a.len() {
            let z = a[p] * w[q][p];
            if z > 0.0 && zp != 0.0 {
                r[p] += alpha * z / zp * upper[q];
            }
            if z < 0.0 && zn != 0.0 {
                r[p] -= beta * z / zn * upper[q];
            }
        }
    }
    r
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

fn two_layer_dense(rng: &mut ChaCha8Rng, inputs: usize, hidden: usize, classes: usize) -> (Network, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let w1: Vec<Vec<f64>> = (0..hidden).map(|_| random_vec(rng, inputs, -1.0, 1.0)).collect();
    let w2: Vec<Vec<f64>> = (0..classes).map(|_| random_vec(rng, hidden, -1.0, 1.0)).collect();
    let net = Network::new(
        vec![inputs],
        vec![
            layer(
                LayerSpec::Dense { inputs, outputs: hidden },
                w1.concat(),
                vec![0.0; hidden],
            ),
            layer(LayerSpec::Relu, vec![], vec![]),
            layer(
                LayerSpec::Dense {
                    inputs: hidden,
                    outputs: classes,
                },
                w2.concat(),
                vec![0.0; classes],
            ),
        ],
    )
    .unwrap();
    (net, w1, w2)
}

#[test]
fn two_layer_dense_net_matches_loop_oracle_and_conserves() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let (net, w1, w2) = two_layer_dense(&mut rng, 6, 5, 3);
        let x = random_vec(&mut rng, 6, 0.0, 1.0);
        let y = rng.random_range(0..3);
        let h: Vec<f64> = w1
            .iter()
            .map(|row| row.iter().zip(&x).map(|(w, a)| w * a).sum::<f64>().max(0.0))
            .collect();
        let mut r_out = vec![0.0; 3];
        r_out[y] = 1.0;
        let r_hidden = oracle_step(&h, &w2, &[0.0; 3], &r_out, 2.0, 1.0);
        let r_input = oracle_step(&x, &w1, &[0.0; 5], &r_hidden, 2.0, 1.0);

        let maps = relevance_at_layers(&net, &Tensor::from_vec(x.clone()), y, &[0, 1], &EXACT).unwrap();
        for (got, want) in maps.get(1).unwrap().data().iter().zip(&r_hidden) {
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "{got} vs {want}");
        }
        for (got, want) in maps.get(0).unwrap().data().iter().zip(&r_input) {
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "{got} vs {want}");
        }
        let s1 = maps.get(1).unwrap().sum();
        let s0 = maps.get(0).unwrap().sum();
        // the sums are only conserved when every hidden unit has both pools populated
        let both_pools = w2[y].iter().zip(&h).any(|(w, a)| w * a > 0.0) && w2[y].iter().zip(&h).any(|(w, a)| w * a < 0.0);
        if both_pools {
            assert!(rel_err(s1, 1.0) < 1e-6, "sum at hidden layer {s1}");
        }
        let hidden_ok = (0..5).all(|q| {
            r_hidden[q] == 0.0
                || (w1[q].iter().zip(&x).any(|(w, a)| w * a > 0.0) && w1[q].iter().zip(&x).any(|(w, a)| w * a < 0.0))
        });
        if both_pools && hidden_ok {
            assert!(rel_err(s0, s1) < 1e-6, "sum at input {s0} vs {s1}");
        }
    }
}

#[test]
fn single_path_network_concentrates_relevance() {
    // hidden unit 1 is the only one connected to the output
    let w1 = vec![0.5, 0.2, 0.3, 0.9, 0.1, 0.4];
    let w2 = vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
    let net = Network::new(
        vec![2],
        vec![
            layer(LayerSpec::Dense { inputs: 2, outputs: 3 }, w1, vec![0.0; 3]),
            layer(LayerSpec::Relu, vec![], vec![]),
            layer(LayerSpec::Dense { inputs: 3, outputs: 2 }, w2, vec![0.0; 2]),
        ],
    )
    .unwrap();
    let r = relevance_at_layer(&net, &Tensor::from_vec(vec![1.0, 1.0]), 0, 1, &EXACT).unwrap();
    // one positive contribution only: alpha times the full share
    assert_eq!(r.data(), &[0.0, 2.0, 0.0]);
}

/// Expands a conv layer into an explicit `[out, in]` matrix by direct indexing.
fn conv_matrix(weight: &[f64], cin: usize, cout: usize, k: usize, pad: usize, h: usize, w: usize) -> Vec<Vec<f64>> {
    let (ho, wo) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
    let mut m = vec![vec![0.0; cin * h * w]; cout * ho * wo];
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &mut m[(co * ho + oy) * wo + ox];
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy + ky) as isize - pad as isize;
                            let ix = (ox + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                row[(ci * h + iy as usize) * w + ix as usize] +=
                                    weight[((co * cin + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    m
}

#[test]
fn conv_layer_relevance_matches_explicit_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (cin, cout, hw) = (2, 3, 4);
    let wc = random_vec(&mut rng, cout * cin * 9, -1.0, 1.0);
    let bc = random_vec(&mut rng, cout, -0.2, 0.2);
    let wd = random_vec(&mut rng, 4 * cout * hw * hw, -1.0, 1.0);
    let net = Network::new(
        vec![cin, hw, hw],
        vec![
            layer(LayerSpec::conv3x3(cin, cout), wc.clone(), bc.clone()),
            layer(LayerSpec::Relu, vec![], vec![]),
            layer(LayerSpec::Flatten, vec![], vec![]),
            layer(
                LayerSpec::Dense {
                    inputs: cout * hw * hw,
                    outputs: 4,
                },
                wd.clone(),
                vec![0.0; 4],
            ),
        ],
    )
    .unwrap();
    // signed inputs exercise the negative-activation branches
    let x = random_vec(&mut rng, cin * hw * hw, -1.0, 1.0);
    let m = conv_matrix(&wc, cin, cout, 3, 1, hw, hw);
    let bias_full: Vec<f64> = (0..cout * hw * hw).map(|q| bc[q / (hw * hw)]).collect();
    let h: Vec<f64> = m
        .iter()
        .zip(&bias_full)
        .map(|(row, b)| (row.iter().zip(&x).map(|(w, a)| w * a).sum::<f64>() + b).max(0.0))
        .collect();
    let wd_rows: Vec<Vec<f64>> = wd.chunks(cout * hw * hw).map(<[f64]>::to_vec).collect();
    let r_out = vec![0.0, 0.0, 1.0, 0.0];
    let r_h = oracle_step(&h, &wd_rows, &[0.0; 4], &r_out, 2.0, 1.0);
    let r_x = oracle_step(&x, &m, &bias_full, &r_h, 2.0, 1.0);

    let maps = relevance_at_layers(&net, &Tensor::new(vec![cin, hw, hw], x).unwrap(), 2, &[0, 1], &EXACT).unwrap();
    for (got, want) in maps.get(1).unwrap().data().iter().zip(&r_h) {
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
    for (got, want) in maps.get(0).unwrap().data().iter().zip(&r_x) {
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

#[test]
fn batch_norm_is_folded_into_the_preceding_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let wc = random_vec(&mut rng, 2 * 9, -1.0, 1.0);
    let bc = random_vec(&mut rng, 2, -0.3, 0.3);
    let gamma = random_vec(&mut rng, 2, 0.5, 1.5);
    let beta = random_vec(&mut rng, 2, -0.3, 0.3);
    let mean = random_vec(&mut rng, 2, -0.3, 0.3);
    let var = random_vec(&mut rng, 2, 0.5, 2.0);
    let eps = 1e-5;
    let wd = random_vec(&mut rng, 2 * 2 * 9, -1.0, 1.0);
    let bn = Layer {
        spec: LayerSpec::BatchNorm { channels: 2, eps },
        params: Params {
            weight: gamma.clone(),
            bias: beta.clone(),
            running_mean: mean.clone(),
            running_var: var.clone(),
        },
    };
    let tail = |first: Vec<Layer>| {
        let mut l = first;
        l.push(layer(LayerSpec::Relu, vec![], vec![]));
        l.push(layer(LayerSpec::Flatten, vec![], vec![]));
        l.push(layer(LayerSpec::Dense { inputs: 18, outputs: 2 }, wd.clone(), vec![0.0; 2]));
        Network::new(vec![1, 3, 3], l).unwrap()
    };
    let with_bn = tail(vec![layer(LayerSpec::conv3x3(1, 2), wc.clone(), bc.clone()), bn]);
    let mut wf = wc.clone();
    let mut bf = bc.clone();
    for c in 0..2 {
        let s = gamma[c] / (var[c] + eps).sqrt();
        wf[c * 9..(c + 1) * 9].iter_mut().for_each(|w| *w *= s);
        bf[c] = s * (bc[c] - mean[c]) + beta[c];
    }
    let folded = tail(vec![layer(LayerSpec::conv3x3(1, 2), wf, bf)]);
    let x = Tensor::new(vec![1, 3, 3], random_vec(&mut rng, 9, 0.0, 1.0)).unwrap();
    let a = relevance_at_layers(&with_bn, &x, 1, &[0, 1], &EXACT).unwrap();
    let b = relevance_at_layers(&folded, &x, 1, &[0, 1], &EXACT).unwrap();
    for id in [0, 1] {
        for (u, v) in a.get(id).unwrap().data().iter().zip(b.get(id).unwrap().data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn output_layer_map_is_the_label_one_hot() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (net, _, _) = two_layer_dense(&mut rng, 4, 6, 5);
    for _ in 0..100 {
        let x = Tensor::from_vec(random_vec(&mut rng, 4, 0.0, 1.0));
        let y = rng.random_range(0..5);
        let maps = relevance_at_layers(&net, &x, y, &[1], &LrpParams::default()).unwrap();
        let top = maps.get(net.depth()).unwrap();
        let expected: Vec<f64> = (0..5).map(|i| if i == y { 1.0 } else { 0.0 }).collect();
        assert_eq!(top.data(), expected.as_slice());
    }
}

#[test]
fn relu_transparency_on_tapped_layers() {
    let net = racnet_core::nn::ArchSpec {
        input_shape: vec![1, 6, 6],
        conv_channels: vec![3, 4],
        pool_after: vec![1],
        hidden: vec![],
        num_classes: 3,
    }
    .build(2)
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::new(vec![1, 6, 6], random_vec(&mut rng, 36, 0.0, 1.0)).unwrap();
    let tap_pos = net.tap_position(1).unwrap();
    let acts = net.layer_outputs(&x).unwrap();
    let r = relevance_at_layer(&net, &x, 0, 1, &LrpParams::default()).unwrap();
    for (rv, av) in r.data().iter().zip(acts[tap_pos].data()) {
        if *av == 0.0 {
            assert_eq!(*rv, 0.0);
        }
    }
}

fn conv_toy_net(seed: u64, classes: usize) -> Network {
    racnet_core::nn::ArchSpec {
        input_shape: vec![1, 6, 6],
        conv_channels: vec![4, 5],
        pool_after: vec![1],
        hidden: vec![],
        num_classes: classes,
    }
    .build(seed)
    .unwrap()
}

fn toy_data(seed: u64, n: usize, classes: usize) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = random_vec(&mut rng, n * 36, 0.0, 1.0);
    let labels = (0..n).map(|i| i % classes).collect();
    LabeledDataset::new(vec![1, 6, 6], classes, inputs, labels, Split::Train).unwrap()
}

#[test]
fn matrix_matches_per_sample_loop() {
    let net = conv_toy_net(1, 3);
    let data = toy_data(2, 6, 3);
    let p = LrpParams::default();
    let m = relevance_score_matrix(&net, &data, 2, &p).unwrap();
    let mut rows = vec![vec![0.0; 5]; 3];
    let mut counts = [0usize; 3];
    for i in 0..data.len() {
        let r = relevance_at_layer(&net, &data.input_tensor(i), data.label(i), 2, &p).unwrap();
        let f = feature_map_relevance(&r).unwrap();
        counts[data.label(i)] += 1;
        rows[data.label(i)].iter_mut().zip(&f).for_each(|(a, b)| *a += b);
    }
    for c in 0..3 {
        for j in 0..5 {
            let want = rows[c][j] / counts[c] as f64;
            assert!((m.rows[c][j] - want).abs() < 1e-12);
        }
    }
    assert_eq!(m.class_counts, vec![2, 2, 2]);
}

#[test]
fn one_sample_per_class_gives_that_sample_row() {
    let net = conv_toy_net(4, 3);
    let data = toy_data(5, 3, 3);
    let p = LrpParams::default();
    let m = relevance_score_matrix(&net, &data, 1, &p).unwrap();
    for i in 0..3 {
        let r = relevance_at_layer(&net, &data.input_tensor(i), data.label(i), 1, &p).unwrap();
        assert_eq!(m.rows[data.label(i)], feature_map_relevance(&r).unwrap());
    }
}

#[test]
fn duplicating_the_dataset_leaves_the_matrix_unchanged() {
    let net = conv_toy_net(6, 3);
    let data = toy_data(7, 9, 3);
    let doubled = data.concat(&data).unwrap();
    let p = LrpParams::default();
    let a = relevance_score_matrix(&net, &data, 2, &p).unwrap();
    let b = relevance_score_matrix(&net, &doubled, 2, &p).unwrap();
    for (ra, rb) in a.rows.iter().zip(&b.rows) {
        for (u, v) in ra.iter().zip(rb) {
            assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
        }
    }
}

#[test]
fn missing_class_and_non_conv_layers_are_rejected() {
    let net = conv_toy_net(8, 3);
    let data = toy_data(9, 4, 2);
    let data = LabeledDataset::new(
        vec![1, 6, 6],
        3,
        (0..4).flat_map(|i| data.input(i).to_vec()).collect(),
        vec![0, 1, 0, 1],
        Split::Train,
    )
    .unwrap();
    assert!(matches!(
        relevance_score_matrix(&net, &data, 1, &LrpParams::default()),
        Err(Error::EmptyClass { class: 2 })
    ));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (dense_net, _, _) = two_layer_dense(&mut rng, 36, 4, 3);
    let flat = LabeledDataset::new(vec![36], 3, (0..4).flat_map(|i| data.input(i).to_vec()).collect(), vec![0, 1, 2, 0], Split::Train)
        .unwrap();
    assert!(relevance_score_matrix(&dense_net, &flat, 1, &LrpParams::default()).is_err());
    assert!(relevance_score_matrix(&net, &data, 3, &LrpParams::default()).is_err());
}

#[test]
fn thread_count_does_not_change_the_matrix() {
    let net = conv_toy_net(10, 3);
    let data = toy_data(11, 30, 3);
    let p = LrpParams::default();
    let serial = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| relevance_score_matrix(&net, &data, 2, &p).unwrap());
    let parallel = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap()
        .install(|| relevance_score_matrix(&net, &data, 2, &p).unwrap());
    assert_eq!(serial, parallel);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dense_step_conserves_relevance(seed in any::<u64>(), inputs in 3usize..12, outputs in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<Vec<f64>> = (0..outputs).map(|_| random_vec(&mut rng, inputs, -1.0, 1.0)).collect();
        let a = random_vec(&mut rng, inputs, 0.05, 1.0);
        let upper = random_vec(&mut rng, outputs, 0.0, 1.0);
        let l = layer(LayerSpec::Dense { inputs, outputs }, w.concat(), vec![0.0; outputs]);
        let r = racnet_core::lrp::lrp_step(&l, &Tensor::from_vec(a.clone()), &Tensor::from_vec(upper.clone()), &EXACT).unwrap();
        let want = oracle_step(&a, &w, &vec![0.0; outputs], &upper, 2.0, 1.0);
        for (g, o) in r.data().iter().zip(&want) {
            prop_assert!((g - o).abs() <= 1e-9 * o.abs().max(1.0));
        }
        let mixed = (0..outputs).all(|q| w[q].iter().any(|&v| v > 0.0) && w[q].iter().any(|&v| v < 0.0));
        if mixed {
            let total: f64 = upper.iter().sum();
            prop_assert!((r.sum() - total).abs() <= 1e-6 * total.abs().max(1e-9));
        }
    }

    #[test]
    fn zero_upper_relevance_stays_zero(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = conv_toy_net(seed, 3);
        let x = Tensor::new(vec![1, 6, 6], random_vec(&mut rng, 36, 0.0, 1.0)).unwrap();
        let l = &net.layers()[0];
        let r = racnet_core::lrp::lrp_step(l, &x, &Tensor::zeros(&[4, 6, 6]), &LrpParams::default()).unwrap();
        prop_assert!(r.data().iter().all(|&v| v == 0.0));
    }
}
