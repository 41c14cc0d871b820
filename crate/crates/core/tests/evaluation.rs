use proptest::prelude::*;
use racnet_core::data::{LabeledDataset, Split};
use racnet_core::eval::{
    detection_metrics, detection_metrics_from_verdicts, generate_adversarial, match_fnr, msr_confidence, msr_detect,
    msr_rates, ood_eval, ood_report, AttackConfig, AttackMode, TargetRule,
};
use racnet_core::inference::{infer, InferencePolicy, Outcome, Verdict};
use racnet_core::nn::{LayerSpec, Network};
use racnet_core::rac::{BinaryLinearClassifier, Rac, RelevantFeatureSet};
use racnet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(label: Option<usize>) -> (Verdict, bool) {
    (label.map_or(Verdict::NoDecision, Verdict::Classified), false)
}

#[test]
fn four_sample_example() {
    // a, b misclassified by the baseline; the system abstains on a, is right on c, d, wrong on b
    let truths = [0, 1, 2, 3];
    let baseline = [5, 6, 2, 3];
    let verdicts = [verdict(None), verdict(Some(7)), verdict(Some(2)), verdict(Some(3))];
    let r = detection_metrics_from_verdicts(&baseline, &truths, &verdicts).unwrap();
    assert_eq!(r.tnr, Some(50.0));
    assert_eq!(r.fnr, Some(0.0));
    assert_eq!((r.pct_correct, r.pct_nd, r.pct_bad), (50.0, 25.0, 25.0));
    assert_eq!(r.pct_good(), 75.0);
}

#[test]
fn degenerate_detectors() {
    let truths = [0, 1, 2, 3, 4];
    let baseline = [0, 1, 9, 3, 9];
    let same: Vec<_> = baseline.iter().map(|&b| verdict(Some(b))).collect();
    let r = detection_metrics_from_verdicts(&baseline, &truths, &same).unwrap();
    assert_eq!((r.tnr, r.fnr, r.pct_bad), (Some(0.0), Some(0.0), 40.0));

    let all_nd = vec![verdict(None); 5];
    let r = detection_metrics_from_verdicts(&baseline, &truths, &all_nd).unwrap();
    assert_eq!((r.tnr, r.fnr, r.pct_correct), (Some(100.0), Some(100.0), 0.0));

    let r = detection_metrics_from_verdicts(&truths, &truths, &all_nd).unwrap();
    assert_eq!(r.tnr, None);
    assert!(detection_metrics_from_verdicts(&truths, &truths[..4], &all_nd).is_err());
}

/// Independent counting of the same quantities.
fn brute_force(baseline: &[usize], truths: &[usize], labels: &[Option<usize>]) -> (f64, f64, f64, Option<f64>, Option<f64>) {
    let n = truths.len();
    let mut neg = Vec::new();
    let mut pos = Vec::new();
    for i in 0..n {
        if baseline[i] == truths[i] {
            pos.push(i);
        } else {
            neg.push(i);
        }
    }
    let correct = (0..n).filter(|&i| labels[i] == Some(truths[i])).count();
    let nd = (0..n).filter(|&i| labels[i].is_none()).count();
    let bad = n - correct - nd;
    let rate = |set: &Vec<usize>| {
        if set.is_empty() {
            None
        } else {
            Some(100.0 * set.iter().filter(|&&i| labels[i].is_none()).count() as f64 / set.len() as f64)
        }
    };
    let p = |k: usize| 100.0 * k as f64 / n as f64;
    (p(correct), p(nd), p(bad), rate(&neg), rate(&pos))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn metric_identities_hold(
        rows in prop::collection::vec((0usize..4, 0usize..4, prop::option::weighted(0.7, 0usize..4)), 1..60),
    ) {
        let truths: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let baseline: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let labels: Vec<Option<usize>> = rows.iter().map(|r| r.2).collect();
        let verdicts: Vec<_> = labels.iter().map(|&l| verdict(l)).collect();
        let r = detection_metrics_from_verdicts(&baseline, &truths, &verdicts).unwrap();
        prop_assert!((r.pct_correct + r.pct_nd + r.pct_bad - 100.0).abs() <= 1e-9);
        let (c, nd, bad, tnr, fnr) = brute_force(&baseline, &truths, &labels);
        prop_assert_eq!((r.pct_correct, r.pct_nd, r.pct_bad), (c, nd, bad));
        prop_assert_eq!(r.tnr, tnr);
        prop_assert_eq!(r.fnr, fnr);
        if let Some(t) = r.tnr {
            let k = t * r.negatives as f64 / 100.0;
            prop_assert!((k - k.round()).abs() < 1e-9);
        }
        if let Some(f) = r.fnr {
            let k = f * r.positives as f64 / 100.0;
            prop_assert!((k - k.round()).abs() < 1e-9);
        }
    }
}

#[test]
fn msr_examples() {
    let logits = [(0.95f64).ln(), (0.05f64).ln()];
    assert!((msr_confidence(&logits) - 0.95).abs() < 1e-12);
    assert!(!msr_detect(&logits, 0.9));
    for c in [2, 5, 10] {
        assert!(msr_detect(&vec![0.3; c], 1.0 / c as f64 + 1e-9));
    }
}

#[test]
fn msr_matching_reports_incomparability() {
    // two positives only: FNR can be 0, 50 or 100
    let conf = [0.2, 0.9, 0.5, 0.4];
    let positive = [true, true, false, false];
    let m = match_fnr(&conf, &positive, 25.0, 0.5).unwrap();
    assert!(!m.comparable);
    let m = match_fnr(&conf, &positive, 50.0, 0.5).unwrap();
    assert!(m.comparable);
    assert_eq!(msr_rates(&conf, &positive, m.threshold).1, Some(50.0));
    assert!(match_fnr(&conf, &[false; 4], 10.0, 0.5).is_err());
}

fn tiny_net(seed: u64, classes: usize) -> Network {
    Network::init(
        vec![2, 6, 6],
        vec![
            LayerSpec::conv3x3(2, 4),
            LayerSpec::batch_norm(4),
            LayerSpec::Relu,
            LayerSpec::conv3x3(4, 4),
            LayerSpec::batch_norm(4),
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 36,
                outputs: classes,
            },
        ],
        seed,
    )
    .unwrap()
}

fn random_cells(rng: &mut ChaCha8Rng, classes: usize) -> Vec<Rac> {
    [1, 2]
        .iter()
        .map(|&layer| Rac {
            layer,
            tap_shape: vec![4, 6, 6],
            features: RelevantFeatureSet {
                layer,
                k: 2,
                indices: (0..classes).map(|j| vec![j % 4, (j + 1) % 4]).collect(),
            },
            blcs: (0..classes)
                .map(|class| BinaryLinearClassifier {
                    class,
                    weight: (0..72).map(|_| rng.random_range(-0.5..0.5)).collect(),
                    bias: rng.random_range(-0.5..0.5),
                })
                .collect(),
        })
        .collect()
}

fn images(n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Tensor::new(vec![2, 6, 6], (0..72).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap())
        .collect()
}

/// A dataset labelled by the network itself, so every sample is a positive.
fn self_labelled(net: &Network, xs: &[Tensor]) -> LabeledDataset {
    let labels: Vec<usize> = xs.iter().map(|x| net.forward(x).unwrap().argmax()).collect();
    let data: Vec<f64> = xs.iter().flat_map(|x| x.data().to_vec()).collect();
    LabeledDataset::new(vec![2, 6, 6], net.num_classes(), data, labels, Split::Test).unwrap()
}

#[test]
fn in_distribution_as_ood_matches_detection_nd_rate() {
    let net = tiny_net(3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let racs = random_cells(&mut rng, 4);
    let policy = InferencePolicy::new(vec![1, 2], 0.6).unwrap();
    let xs = images(80, 5);
    let truths: Vec<usize> = (0..80).map(|_| rng.random_range(0..4)).collect();
    let baseline: Vec<usize> = xs.iter().map(|x| net.forward(x).unwrap().argmax()).collect();
    let outcomes: Vec<Outcome> = xs.iter().map(|x| infer(&net, &racs, &policy, x).unwrap()).collect();
    let det = detection_metrics(&baseline, &truths, &outcomes).unwrap();
    let ood = ood_eval(&net, &racs, &policy, "test-as-ood", &xs).unwrap();
    let weighted = det.fnr.unwrap_or(0.0) * det.positives as f64 + det.tnr.unwrap_or(0.0) * det.negatives as f64;
    assert!((ood.tnr - weighted / 80.0).abs() < 1e-9);
    assert_eq!(ood.no_decision, det.nd_positives + det.nd_negatives);
    assert_eq!(ood.tnr, det.pct_nd);
    assert_eq!(ood_report("x", &outcomes).unwrap(), ood_report("x", &outcomes).unwrap());
}

#[test]
fn empty_ood_set_is_an_error() {
    let net = tiny_net(3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let racs = random_cells(&mut rng, 4);
    let policy = InferencePolicy::new(vec![1, 2], 0.6).unwrap();
    assert!(ood_eval(&net, &racs, &policy, "none", &[]).is_err());
    assert!(ood_report("none", &[]).is_err());
}

fn attack_cfg() -> AttackConfig {
    AttackConfig {
        learning_rate: 0.05,
        iterations: 60,
        lambdas: vec![1.0, 10.0, 100.0],
        seed: 1,
        ..AttackConfig::default()
    }
}

#[test]
fn random_net_is_fooled_with_small_distortion() {
    let net = tiny_net(7, 10);
    let xs = images(40, 8);
    let data = self_labelled(&net, &xs);
    let (adv, report) = generate_adversarial(&net, None, &data, &attack_cfg()).unwrap();
    assert_eq!(report.attempted, 40);
    assert!(report.success_rate >= 95.0, "{report:?}");
    let mean_norm = xs.iter().map(|x| x.data().iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / 40.0;
    let mean_l2 = report.mean_l2.unwrap();
    assert!(mean_l2 < 0.5 * mean_norm, "{mean_l2} vs {mean_norm}");
    for a in &adv {
        assert_ne!(a.target, a.true_label);
        assert_eq!(net.forward(&a.input).unwrap().argmax(), a.target);
        assert!(a.input.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let l2 = a.input.data().iter().zip(xs[a.index].data()).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
        assert!((l2 - a.l2).abs() < 1e-12);
    }
    let expected_mean = adv.iter().map(|a| a.l2).sum::<f64>() / adv.len() as f64;
    assert_eq!(mean_l2, expected_mean);
}

#[test]
fn zero_iterations_yield_no_adversaries() {
    let net = tiny_net(7, 10);
    let data = self_labelled(&net, &images(10, 9));
    let cfg = AttackConfig {
        iterations: 0,
        ..attack_cfg()
    };
    let (adv, report) = generate_adversarial(&net, None, &data, &cfg).unwrap();
    assert!(adv.is_empty());
    assert_eq!(report.success_rate, 0.0);
    assert_eq!(report.mean_l2, None);
}

#[test]
fn attacks_are_deterministic_and_report_adversarial_tnr() {
    let net = tiny_net(11, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let racs = random_cells(&mut rng, 4);
    let policy = InferencePolicy::new(vec![1, 2], 0.5).unwrap();
    let data = self_labelled(&net, &images(12, 13));
    for mode in [AttackMode::ZeroKnowledge, AttackMode::FullKnowledge] {
        let cfg = AttackConfig {
            mode,
            target: TargetRule::Next,
            ..attack_cfg()
        };
        let (a, ra) = generate_adversarial(&net, Some((&racs, &policy)), &data, &cfg).unwrap();
        let (b, rb) = generate_adversarial(&net, Some((&racs, &policy)), &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        let flagged = a
            .iter()
            .filter(|e| infer(&net, &racs, &policy, &e.input).unwrap().verdict.is_nd())
            .count();
        assert_eq!(ra.flagged_nd, Some(flagged));
        if ra.succeeded > 0 {
            assert_eq!(ra.adv_tnr, Some(100.0 * flagged as f64 / ra.succeeded as f64));
        }
        assert!(a.iter().all(|e| e.target == (e.true_label + 1) % 4));
    }
}

#[test]
fn full_knowledge_requires_cells() {
    let net = tiny_net(7, 4);
    let data = self_labelled(&net, &images(4, 9));
    let cfg = AttackConfig {
        mode: AttackMode::FullKnowledge,
        ..attack_cfg()
    };
    assert!(generate_adversarial(&net, None, &data, &cfg).is_err());
}
