//! Mini-batch SGD with momentum on softmax cross-entropy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::{Aux, LayerSpec, Mode, ParamGrads};
use super::network::Network;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply by `gamma` after every epoch.
    Step { gamma: f64 },
    /// Cosine annealing to zero over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            epochs: 10,
            schedule: LrSchedule::Cosine,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss of the initialization over the training data.
    pub initial_loss: f64,
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial_loss, |e| e.loss)
    }
}

/// Mean cross-entropy of `logits [N, c]` against `labels`, its gradient, and
/// the number of correct argmax predictions.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor, usize) {
    let n = labels.len();
    let c = logits.len() / n.max(1);
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    let mut correct = 0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * c..(i + 1) * c];
        let p = crate::tensor::softmax(row);
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        if crate::tensor::argmax(row) == y {
            correct += 1;
        }
        for (j, pj) in p.iter().enumerate() {
            grad[i * c + j] = (pj - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (
        loss / n as f64,
        Tensor::new(logits.shape().to_vec(), grad).expect("same shape"),
        correct,
    )
}

fn check_batch(net: &Network, xs: &Tensor, labels: &[usize]) -> Result<()> {
    let shape = xs.shape();
    if shape.len() != net.input_shape().len() + 1 || shape[1..] != net.input_shape()[..] || shape[0] != labels.len() {
        let mut expected = vec![labels.len()];
        expected.extend_from_slice(net.input_shape());
        return Err(Error::ShapeMismatch {
            expected,
            actual: shape.to_vec(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= net.num_classes()) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: net.num_classes(),
        });
    }
    Ok(())
}

/// Mean cross-entropy of a batch `[N, ..input_shape]` under `mode`.
pub fn batch_loss(net: &Network, xs: &Tensor, labels: &[usize], mode: Mode) -> Result<f64> {
    check_batch(net, xs, labels)?;
    let (logits, _, _) = net.run(xs.clone(), 0..net.layers().len(), mode, false, &[]);
    Ok(softmax_cross_entropy(&logits, labels).0)
}

/// [`batch_loss`] plus its gradient with respect to the input batch and to
/// every layer's parameters (one entry per layer position).
pub fn loss_gradients(net: &Network, xs: &Tensor, labels: &[usize], mode: Mode) -> Result<(f64, Tensor, Vec<ParamGrads>)> {
    check_batch(net, xs, labels)?;
    let (logits, trace, _) = net.run(xs.clone(), 0..net.layers().len(), mode, true, &[]);
    let (loss, dlogits, _) = softmax_cross_entropy(&logits, labels);
    let (dx, grads) = net.backward(&trace.expect("recorded"), dlogits, &[], true);
    Ok((loss, dx, grads))
}

/// Mean loss and accuracy in inference mode.
pub fn evaluate(net: &Network, data: &LabeledDataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let mut total = 0.0;
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let logits = net.forward_batch(&data.batch(chunk))?;
        let labels: Vec<usize> = chunk.iter().map(|&i| data.label(i)).collect();
        let (l, _, c) = softmax_cross_entropy(&logits, &labels);
        total += l * chunk.len() as f64;
        correct += c;
    }
    Ok((total / data.len() as f64, correct as f64 / data.len() as f64))
}

fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    match cfg.schedule {
        LrSchedule::Constant => cfg.learning_rate,
        LrSchedule::Step { gamma } => cfg.learning_rate * gamma.powi(epoch as i32),
        LrSchedule::Cosine => {
            let t = epoch as f64 / cfg.epochs.max(1) as f64;
            0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

pub fn train(mut net: Network, data: &LabeledDataset, cfg: &TrainConfig) -> Result<(Network, TrainReport)> {
    if data.is_empty() {
        return Err(Error::Dataset("training data is empty".into()));
    }
    if data.sample_shape() != net.input_shape() || data.num_classes() != net.num_classes() {
        return Err(Error::Dataset(format!(
            "dataset layout {:?} / {} classes does not match network {:?} / {}",
            data.sample_shape(),
            data.num_classes(),
            net.input_shape(),
            net.num_classes()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let (initial_loss, _) = evaluate(&net, data)?;
    let mut report = TrainReport {
        initial_loss,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let mut velocity: Vec<(Vec<f64>, Vec<f64>)> = net
        .layers()
        .iter()
        .map(|l| (vec![0.0; l.params.weight.len()], vec![0.0; l.params.bias.len()]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let n_layers = net.layers().len();

    for epoch in 0..cfg.epochs {
        let lr = learning_rate(cfg, epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let labels: Vec<usize> = chunk.iter().map(|&i| data.label(i)).collect();
            let (logits, trace, _) = net.run(data.batch(chunk), 0..n_layers, Mode::Train, true, &[]);
            let trace = trace.expect("recorded");
            let (loss, dlogits, c) = softmax_cross_entropy(&logits, &labels);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss });
            }
            loss_sum += loss * chunk.len() as f64;
            correct += c;
            let (_, grads) = net.backward(&trace, dlogits, &[], true);

            let bn_m = cfg.bn_momentum;
            for (pos, layer) in net.layers_mut().iter_mut().enumerate() {
                if let (LayerSpec::BatchNorm { .. }, Aux::Norm { batch_mean, batch_var, .. }) =
                    (&layer.spec, &trace.aux[pos])
                {
                    let count = trace.inputs[pos].len() / batch_mean.len();
                    let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
                    for ch in 0..batch_mean.len() {
                        let p = &mut layer.params;
                        p.running_mean[ch] = (1.0 - bn_m) * p.running_mean[ch] + bn_m * batch_mean[ch];
                        p.running_var[ch] = (1.0 - bn_m) * p.running_var[ch] + bn_m * batch_var[ch] * unbias;
                    }
                }
                let decay = if layer.spec.is_weighted() { cfg.weight_decay } else { 0.0 };
                let (vw, vb) = &mut velocity[pos];
                let g = &grads[pos];
                for ((w, v), gw) in layer.params.weight.iter_mut().zip(vw.iter_mut()).zip(&g.weight) {
                    *v = cfg.momentum * *v + gw + decay * *w;
                    *w -= lr * *v;
                }
                for ((w, v), gb) in layer.params.bias.iter_mut().zip(vb.iter_mut()).zip(&g.bias) {
                    *v = cfg.momentum * *v + gb;
                    *w -= lr * *v;
                }
            }
        }
        let stats = EpochStats {
            epoch,
            learning_rate: lr,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        };
        if !stats.loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: usize::MAX,
                loss: stats.loss,
            });
        }
        report.epochs.push(stats);
    }
    for layer in net.layers() {
        layer.check_params()?;
    }
    Ok((net, report))
}
