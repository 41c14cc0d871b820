//! Relevant-feature auxiliary cells: one binary linear classifier per class,
//! each reading only the `k` feature maps most relevant to its class.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::lrp::RelevanceScoreMatrix;
use crate::nn::Network;
use crate::tensor::{argmax, sigmoid, Tensor};

/// Indices of the `k` largest entries of `row`, largest first; ties go to the lower index.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn select_relevant_features(m: &RelevanceScoreMatrix, class: usize, k: usize) -> Result<Vec<usize>> {
    let r = m.num_maps();
    if k == 0 || k > r {
        return Err(Error::TooManyFeatures { k, r, layer: m.layer });
    }
    if class >= m.num_classes() {
        return Err(Error::LabelOutOfRange {
            label: class,
            classes: m.num_classes(),
        });
    }
    Ok(top_k(m.row(class), k))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevantFeatureSet {
    pub layer: usize,
    pub k: usize,
    /// `indices[j]` lists the maps read by class `j`'s classifier.
    pub indices: Vec<Vec<usize>>,
}

impl RelevantFeatureSet {
    pub fn from_matrix(m: &RelevanceScoreMatrix, k: usize) -> Result<Self> {
        let indices = (0..m.num_classes())
            .map(|j| select_relevant_features(m, j, k))
            .collect::<Result<_>>()?;
        Ok(Self {
            layer: m.layer,
            k,
            indices,
        })
    }

    fn check(&self, maps: usize) -> Result<()> {
        for row in &self.indices {
            let mut sorted = row.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if row.len() != self.k || sorted.len() != self.k || sorted.last().is_some_and(|&m| m >= maps) {
                return Err(Error::Corrupt(format!(
                    "feature set for layer {} is not {} distinct indices below {maps}",
                    self.layer, self.k
                )));
            }
        }
        Ok(())
    }
}

/// `1` where the label equals `class`, `0` elsewhere.
pub fn binary_labels(labels: &[usize], class: usize) -> Vec<u8> {
    labels.iter().map(|&y| u8::from(y == class)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlcConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    /// Weight of positive samples in the logistic loss; `None` uses `c - 1`.
    pub positive_weight: Option<f64>,
    /// Train on per-feature standardized inputs (folded back into the weights).
    pub standardize: bool,
    pub seed: u64,
}

impl Default for BlcConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 10,
            batch_size: 64,
            l2: 1e-4,
            positive_weight: None,
            standardize: true,
            seed: 0,
        }
    }
}

impl BlcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("blc.{what}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.l2 >= 0.0) {
            return bad("l2 must be non-negative");
        }
        if self.positive_weight.is_some_and(|w| !(w > 0.0)) {
            return bad("positive_weight must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryLinearClassifier {
    pub class: usize,
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl BinaryLinearClassifier {
    pub fn score(&self, x: &[f64]) -> f64 {
        crate::tensor::dot(&self.weight, x) + self.bias
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        sigmoid(self.score(x))
    }
}

/// Trains a logistic-regression classifier on `x` (`n` rows of `dim`
/// features, row-major) with mini-batch SGD.
pub fn train_blc(x: &[f64], dim: usize, labels: &[u8], class: usize, cfg: &BlcConfig) -> Result<BinaryLinearClassifier> {
    cfg.validate()?;
    let n = labels.len();
    if dim == 0 || x.len() != n * dim {
        return Err(Error::ShapeMismatch {
            expected: vec![n, dim],
            actual: vec![x.len()],
        });
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == n {
        return Err(Error::SingleClass { positives, total: n });
    }
    let pos_weight = cfg.positive_weight.unwrap_or(1.0);

    let (mean, scale) = if cfg.standardize {
        let mut mean = vec![0.0; dim];
        for row in x.chunks(dim) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for row in x.chunks(dim) {
            var.iter_mut().zip(row.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m));
        }
        let scale: Vec<f64> = var
            .iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    0.0
                }
            })
            .collect();
        (mean, scale)
    } else {
        (vec![0.0; dim], vec![1.0; dim])
    };

    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut vw = vec![0.0; dim];
    let mut vb = 0.0;
    let mut gw = vec![0.0; dim];
    let mut z = vec![0.0; dim];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (class as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            gw.fill(0.0);
            let mut gb = 0.0;
            for &i in batch {
                let row = &x[i * dim..(i + 1) * dim];
                for d in 0..dim {
                    z[d] = (row[d] - mean[d]) * scale[d];
                }
                let y = f64::from(labels[i]);
                let weight = if labels[i] == 1 { pos_weight } else { 1.0 };
                let err = weight * (sigmoid(crate::tensor::dot(&w, &z) + b) - y);
                gw.iter_mut().zip(&z).for_each(|(g, zd)| *g += err * zd);
                gb += err;
            }
            let inv = 1.0 / batch.len() as f64;
            for d in 0..dim {
                vw[d] = cfg.momentum * vw[d] + gw[d] * inv + cfg.l2 * w[d];
                w[d] -= cfg.learning_rate * vw[d];
            }
            vb = cfg.momentum * vb + gb * inv;
            b -= cfg.learning_rate * vb;
        }
        if !b.is_finite() || w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                batch: usize::MAX,
                loss: f64::NAN,
            });
        }
    }

    let weight: Vec<f64> = w.iter().zip(&scale).map(|(wd, s)| wd * s).collect();
    let bias = b - weight.iter().zip(&mean).map(|(wd, m)| wd * m).sum::<f64>();
    Ok(BinaryLinearClassifier { class, weight, bias })
}

/// Class decision of an auxiliary cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RacOutput {
    pub class: usize,
    pub prob: f64,
    pub probs: Vec<f64>,
}

impl RacOutput {
    /// Arg-max and max of a probability vector (ties go to the lowest class).
    pub fn from_probs(probs: Vec<f64>) -> Self {
        let class = argmax(&probs);
        Self {
            class,
            prob: probs[class],
            probs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rac {
    pub layer: usize,
    /// Per-sample tap shape `[r, H, W]`.
    pub tap_shape: Vec<usize>,
    pub features: RelevantFeatureSet,
    pub blcs: Vec<BinaryLinearClassifier>,
}

/// Copies the listed `[H, W]` maps of a `[r, H, W]` tap into one vector.
pub fn gather_maps(tap: &[f64], maps: &[usize], plane: usize, out: &mut Vec<f64>) {
    out.clear();
    for &m in maps {
        out.extend_from_slice(&tap[m * plane..(m + 1) * plane]);
    }
}

impl Rac {
    pub fn num_classes(&self) -> usize {
        self.blcs.len()
    }

    fn plane(&self) -> usize {
        self.tap_shape[1..].iter().product()
    }

    /// Inputs per classifier, `k * H * W`.
    pub fn input_width(&self) -> usize {
        self.features.k * self.plane()
    }

    /// Added parameters, `c * (k * H * W + 1)`.
    pub fn param_count(&self) -> usize {
        self.num_classes() * (self.input_width() + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tap_shape.len() != 3 {
            return Err(Error::Corrupt(format!("RAC tap shape {:?} is not [r, H, W]", self.tap_shape)));
        }
        self.features.check(self.tap_shape[0])?;
        if self.features.indices.len() != self.blcs.len() || self.features.layer != self.layer {
            return Err(Error::Corrupt("RAC feature sets do not match its classifiers".into()));
        }
        for (j, blc) in self.blcs.iter().enumerate() {
            if blc.class != j || blc.weight.len() != self.input_width() {
                return Err(Error::Corrupt(format!("classifier {j} has the wrong class or width")));
            }
        }
        Ok(())
    }

    /// Per-class probabilities from a flat per-sample tap.
    pub fn probabilities(&self, tap: &[f64]) -> Result<Vec<f64>> {
        let len: usize = self.tap_shape.iter().product();
        if tap.len() != len {
            return Err(Error::ShapeMismatch {
                expected: self.tap_shape.clone(),
                actual: vec![tap.len()],
            });
        }
        let plane = self.plane();
        let mut buf = Vec::with_capacity(self.input_width());
        Ok(self
            .blcs
            .iter()
            .zip(&self.features.indices)
            .map(|(blc, maps)| {
                gather_maps(tap, maps, plane, &mut buf);
                blc.probability(&buf)
            })
            .collect())
    }

    pub fn forward(&self, tap: &Tensor) -> Result<RacOutput> {
        if tap.shape() != self.tap_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: self.tap_shape.clone(),
                actual: tap.shape().to_vec(),
            });
        }
        Ok(RacOutput::from_probs(self.probabilities(tap.data())?))
    }

    /// Gradient of `sum_j BCE(p_j, [j == target])` w.r.t. the tap, plus the loss.
    pub fn target_loss_gradient(&self, tap: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
        let probs = self.probabilities(tap)?;
        let plane = self.plane();
        let mut grad = vec![0.0; tap.len()];
        let mut loss = 0.0;
        for (j, (blc, maps)) in self.blcs.iter().zip(&self.features.indices).enumerate() {
            let y = if j == target { 1.0 } else { 0.0 };
            let p = probs[j].clamp(1e-12, 1.0 - 1e-12);
            loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            let e = probs[j] - y;
            for (slot, &m) in maps.iter().enumerate() {
                let w = &blc.weight[slot * plane..(slot + 1) * plane];
                grad[m * plane..(m + 1) * plane]
                    .iter_mut()
                    .zip(w)
                    .for_each(|(g, wv)| *g += e * wv);
            }
        }
        Ok((loss, grad))
    }
}

/// Taps of one layer for a whole dataset, row-major `[n, r*H*W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TapSet {
    pub layer: usize,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TapSet {
    pub fn row_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.row_len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let l = self.row_len();
        &self.data[i * l..(i + 1) * l]
    }
}

/// Taps of several layers plus the final logits, computed in batches.
pub fn collect_taps(net: &Network, data: &LabeledDataset, layers: &[usize]) -> Result<(Vec<TapSet>, Vec<Vec<f64>>)> {
    let mut sets: Vec<TapSet> = layers
        .iter()
        .map(|&l| {
            Ok(TapSet {
                layer: l,
                shape: net.tap_shape(l)?,
                data: Vec::new(),
            })
        })
        .collect::<Result<_>>()?;
    let mut logits = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(128) {
        let (out, taps) = net.forward_batch_with_taps(&data.batch(chunk), layers)?;
        logits.extend(out.data().chunks(net.num_classes()).map(<[f64]>::to_vec));
        for set in &mut sets {
            set.data.extend_from_slice(taps[&set.layer].data());
        }
    }
    Ok((sets, logits))
}

/// Per-classifier training accuracy on the binary task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlcReport {
    pub class: usize,
    pub positives: usize,
    pub train_accuracy: f64,
}

/// Trains one auxiliary cell from precomputed taps. Classifiers are trained
/// in parallel with per-class seeds, so the result matches sequential training.
pub fn train_rac_from_taps(
    taps: &TapSet,
    labels: &[usize],
    matrix: &RelevanceScoreMatrix,
    k: usize,
    cfg: &BlcConfig,
) -> Result<(Rac, Vec<BlcReport>)> {
    if taps.shape.len() != 3 {
        return Err(Error::NotTappable {
            id: taps.layer,
            reason: "auxiliary cells need a convolutional tap".into(),
        });
    }
    if matrix.layer != taps.layer || matrix.num_maps() != taps.shape[0] {
        return Err(Error::InvalidArgument(format!(
            "relevance matrix for layer {} ({} maps) does not fit taps of layer {} ({} maps)",
            matrix.layer,
            matrix.num_maps(),
            taps.layer,
            taps.shape[0]
        )));
    }
    if labels.len() != taps.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![taps.len()],
            actual: vec![labels.len()],
        });
    }
    let features = RelevantFeatureSet::from_matrix(matrix, k)?;
    let c = matrix.num_classes();
    let plane = taps.shape[1] * taps.shape[2];
    let dim = k * plane;
    let cfg = BlcConfig {
        positive_weight: Some(cfg.positive_weight.unwrap_or((c - 1) as f64)),
        ..cfg.clone()
    };
    let trained: Vec<(BinaryLinearClassifier, BlcReport)> = (0..c)
        .into_par_iter()
        .map(|j| {
            let mut x = Vec::with_capacity(taps.len() * dim);
            let mut buf = Vec::with_capacity(dim);
            for i in 0..taps.len() {
                gather_maps(taps.row(i), &features.indices[j], plane, &mut buf);
                x.extend_from_slice(&buf);
            }
            let y = binary_labels(labels, j);
            let blc = train_blc(&x, dim, &y, j, &cfg)?;
            let correct = x
                .chunks(dim)
                .zip(&y)
                .filter(|(row, &t)| (blc.score(row) > 0.0) == (t == 1))
                .count();
            let report = BlcReport {
                class: j,
                positives: y.iter().filter(|&&t| t == 1).count(),
                train_accuracy: correct as f64 / y.len() as f64,
            };
            Ok((blc, report))
        })
        .collect::<Result<_>>()?;
    let (blcs, reports) = trained.into_iter().unzip();
    let rac = Rac {
        layer: taps.layer,
        tap_shape: taps.shape.clone(),
        features,
        blcs,
    };
    Ok((rac, reports))
}

pub fn train_rac(
    net: &Network,
    data: &LabeledDataset,
    matrix: &RelevanceScoreMatrix,
    k: usize,
    cfg: &BlcConfig,
) -> Result<(Rac, Vec<BlcReport>)> {
    let (taps, _) = collect_taps(net, data, &[matrix.layer])?;
    train_rac_from_taps(&taps[0], data.labels(), matrix, k, cfg)
}

/// A set of auxiliary cells together with the hashes they were built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RacBundle {
    pub model_hash: String,
    /// Digest of each layer's relevance matrix, in `racs` order.
    pub matrix_hashes: Vec<String>,
    pub racs: Vec<Rac>,
}

impl RacBundle {
    pub fn param_count(&self) -> usize {
        self.racs.iter().map(Rac::param_count).sum()
    }

    pub fn layers(&self) -> Vec<usize> {
        self.racs.iter().map(|r| r.layer).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.matrix_hashes.len() != self.racs.len() {
            return Err(Error::Corrupt("bundle lists a different number of matrices and cells".into()));
        }
        self.racs.iter().try_for_each(Rac::validate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_orders_and_breaks_ties() {
        assert_eq!(top_k(&[0.1, 0.9, 0.5], 2), vec![1, 2]);
        assert_eq!(top_k(&[0.3, 0.3, 0.3], 2), vec![0, 1]);
        assert_eq!(top_k(&[0.2, 0.1, 0.4], 3), vec![2, 0, 1]);
    }

    #[test]
    fn binary_labels_partition() {
        let labels = [0, 1, 2, 1];
        assert_eq!(binary_labels(&labels, 1), vec![0, 1, 0, 1]);
        assert_eq!(binary_labels(&labels, 5), vec![0, 0, 0, 0]);
        for i in 0..labels.len() {
            let total: u8 = (0..3).map(|j| binary_labels(&labels, j)[i]).sum();
            assert_eq!(total, 1);
        }
    }

    #[test]
    fn rac_output_picks_max_with_lowest_tie() {
        let o = RacOutput::from_probs(vec![0.1, 0.9, 0.3]);
        assert_eq!((o.class, o.prob), (1, 0.9));
        let o = RacOutput::from_probs(vec![0.4, 0.4, 0.4]);
        assert_eq!((o.class, o.prob), (0, 0.4));
    }

    #[test]
    fn single_class_data_is_rejected() {
        let err = train_blc(&[1.0, 2.0], 1, &[1, 1], 0, &BlcConfig::default());
        assert!(matches!(err, Err(Error::SingleClass { positives: 2, total: 2 })));
    }

    #[test]
    fn zero_epochs_returns_the_zero_initialization() {
        let cfg = BlcConfig {
            epochs: 0,
            ..Default::default()
        };
        let blc = train_blc(&[1.0, 2.0, 3.0, 4.0], 2, &[0, 1], 0, &cfg).unwrap();
        assert!(blc.weight.iter().all(|&w| w == 0.0));
        assert_eq!(blc.bias, 0.0);
    }
}
