//! Layer-wise relevance propagation with the alpha-beta rule and the
//! class-by-feature-map relevance matrix built from it.
//!
//! Relevance starts one-hot at the true class and is pushed down layer by
//! layer. Weighted layers split each contribution `a_p * w_pq` into its
//! positive and negative part:
//!
//! ```text
//! R_p = sum_q ( alpha * (a_p w_pq)+ / sum_p (a_p w_pq)+  -  beta * (a_p w_pq)- / sum_p (a_p w_pq)- ) * R_q
//! ```
//!
//! Biases join the pools in the denominators. A batch-norm that follows a
//! weighted layer is folded into it. ReLU passes relevance through, max-pool
//! sends it to the window winner, average-pool shares it in proportion to
//! the inputs.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::kernels::{self, ConvGeom, PoolGeom};
use crate::nn::layer::{Aux, Layer, LayerSpec, Mode};
use crate::nn::Network;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrpParams {
    pub alpha: f64,
    pub beta: f64,
    /// Denominators smaller than this in magnitude are clamped to it.
    pub stabilizer_eps: f64,
}

impl Default for LrpParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 1.0,
            stabilizer_eps: 1e-9,
        }
    }
}

impl LrpParams {
    pub fn validate(&self) -> Result<()> {
        let finite = self.alpha.is_finite() && self.beta.is_finite() && self.stabilizer_eps.is_finite();
        if !finite || self.beta < 0.0 || self.stabilizer_eps < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "LRP parameters must be finite with beta >= 0 and eps >= 0, got {self:?}"
            )));
        }
        if (self.alpha - self.beta - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "LRP requires alpha - beta = 1, got alpha {} and beta {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// One-hot relevance at the output layer.
pub fn output_relevance(true_label: usize, classes: usize) -> Result<Vec<f64>> {
    if true_label >= classes {
        return Err(Error::LabelOutOfRange {
            label: true_label,
            classes,
        });
    }
    let mut r = vec![0.0; classes];
    r[true_label] = 1.0;
    Ok(r)
}

/// A weighted layer, possibly with a batch-norm folded in, seen as a linear map.
struct Affine {
    op: LinearOp,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

enum LinearOp {
    Dense { inputs: usize, outputs: usize },
    Conv(ConvGeom),
}

impl Affine {
    fn from_layer(layer: &Layer, in_shape: &[usize]) -> Result<Self> {
        let op = match layer.spec {
            LayerSpec::Dense { inputs, outputs } => LinearOp::Dense { inputs, outputs },
            LayerSpec::Conv2d { .. } => LinearOp::Conv(
                layer
                    .conv_geom(in_shape)
                    .ok_or_else(|| Error::InvalidNetwork("conv geometry does not fit its input".into()))?,
            ),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "{} is not a weighted layer",
                    layer.spec.name()
                )))
            }
        };
        Ok(Self {
            op,
            weight: layer.params.weight.clone(),
            bias: layer.params.bias.clone(),
        })
    }

    fn out_channels(&self) -> usize {
        match self.op {
            LinearOp::Dense { outputs, .. } => outputs,
            LinearOp::Conv(g) => g.out_c,
        }
    }

    /// Folds an inference-mode batch-norm `y = s * (z - mean) + beta` into the weights.
    fn fold_batch_norm(&mut self, bn: &Layer) -> Result<()> {
        let LayerSpec::BatchNorm { channels, eps } = bn.spec else {
            return Err(Error::InvalidArgument("expected a batch-norm layer".into()));
        };
        if channels != self.out_channels() {
            return Err(Error::InvalidNetwork(format!(
                "batch-norm over {channels} channels follows a layer with {} outputs",
                self.out_channels()
            )));
        }
        let per = self.weight.len() / channels;
        for c in 0..channels {
            let p = &bn.params;
            let s = p.weight[c] / (p.running_var[c] + eps).sqrt();
            self.weight[c * per..(c + 1) * per].iter_mut().for_each(|w| *w *= s);
            self.bias[c] = s * (self.bias[c] - p.running_mean[c]) + p.bias[c];
        }
        Ok(())
    }

    fn apply(&self, a: &[f64], w: &[f64], cols: &mut Vec<f64>) -> Vec<f64> {
        match self.op {
            LinearOp::Dense { inputs, outputs } => {
                let mut y = vec![0.0; outputs];
                kernels::dense_forward(a, 1, inputs, outputs, w, None, &mut y);
                y
            }
            LinearOp::Conv(g) => {
                let mut y = vec![0.0; g.out_len()];
                kernels::conv_forward_sample(a, w, None, &g, cols, &mut y);
                y
            }
        }
    }

    fn apply_transpose(&self, c: &[f64], w: &[f64], cols: &mut Vec<f64>) -> Vec<f64> {
        match self.op {
            LinearOp::Dense { inputs, outputs } => {
                let mut x = vec![0.0; inputs];
                kernels::dense_backward_data(c, 1, inputs, outputs, w, &mut x);
                x
            }
            LinearOp::Conv(g) => {
                let mut x = vec![0.0; g.in_len()];
                kernels::conv_backward_data_sample(c, w, &g, cols, &mut x);
                x
            }
        }
    }

    fn bias_at(&self, q: usize) -> f64 {
        match self.op {
            LinearOp::Dense { .. } => self.bias[q],
            LinearOp::Conv(g) => self.bias[q / g.out_pixels()],
        }
    }

    fn alpha_beta(&self, a: &[f64], upper: &[f64], params: &LrpParams) -> Vec<f64> {
        let pos = |v: &[f64]| v.iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
        let neg = |v: &[f64]| v.iter().map(|x| x.min(0.0)).collect::<Vec<_>>();
        let (w_pos, w_neg) = (pos(&self.weight), neg(&self.weight));
        let (a_pos, a_neg) = (pos(a), neg(a));
        let has_neg_input = a.iter().any(|&x| x < 0.0);
        let mut cols = Vec::new();

        let mut z_pos = self.apply(&a_pos, &w_pos, &mut cols);
        let mut z_neg = self.apply(&a_pos, &w_neg, &mut cols);
        if has_neg_input {
            let zn = self.apply(&a_neg, &w_neg, &mut cols);
            let zp = self.apply(&a_neg, &w_pos, &mut cols);
            z_pos.iter_mut().zip(&zn).for_each(|(s, v)| *s += v);
            z_neg.iter_mut().zip(&zp).for_each(|(s, v)| *s += v);
        }
        let eps = params.stabilizer_eps;
        let mut c_pos = vec![0.0; upper.len()];
        let mut c_neg = vec![0.0; upper.len()];
        for q in 0..upper.len() {
            let b = self.bias_at(q);
            let dp = z_pos[q] + b.max(0.0);
            let dn = z_neg[q] + b.min(0.0);
            if dp != 0.0 {
                c_pos[q] = params.alpha * upper[q] / dp.max(eps);
            }
            if dn != 0.0 {
                c_neg[q] = params.beta * upper[q] / dn.min(-eps);
            }
        }

        let back_pp = self.apply_transpose(&c_pos, &w_pos, &mut cols);
        let back_nn = self.apply_transpose(&c_neg, &w_neg, &mut cols);
        let mut r: Vec<f64> = a_pos
            .iter()
            .zip(back_pp.iter().zip(&back_nn))
            .map(|(ap, (pp, nn))| ap * (pp - nn))
            .collect();
        if has_neg_input {
            let back_pn = self.apply_transpose(&c_pos, &w_neg, &mut cols);
            let back_np = self.apply_transpose(&c_neg, &w_pos, &mut cols);
            for (p, rp) in r.iter_mut().enumerate() {
                *rp += a_neg[p] * (back_pn[p] - back_np[p]);
            }
        }
        r
    }
}

/// Alpha-beta rule on a batch-norm that is not preceded by a weighted layer:
/// each output has a single input, so it is a diagonal affine map.
fn batch_norm_alone(bn: &Layer, in_shape: &[usize], a: &[f64], upper: &[f64], params: &LrpParams) -> Vec<f64> {
    let LayerSpec::BatchNorm { channels, eps } = bn.spec else {
        unreachable!("caller checked the layer kind")
    };
    let per = in_shape[1..].iter().product::<usize>();
    let mut r = vec![0.0; a.len()];
    for c in 0..channels {
        let p = &bn.params;
        let s = p.weight[c] / (p.running_var[c] + eps).sqrt();
        let b = p.bias[c] - s * p.running_mean[c];
        for i in c * per..(c + 1) * per {
            let z = s * a[i];
            let dp = z.max(0.0) + b.max(0.0);
            let dn = z.min(0.0) + b.min(0.0);
            if dp != 0.0 {
                r[i] += params.alpha * z.max(0.0) / dp.max(params.stabilizer_eps) * upper[i];
            }
            if dn != 0.0 {
                r[i] -= params.beta * z.min(0.0) / dn.min(-params.stabilizer_eps) * upper[i];
            }
        }
    }
    r
}

fn maxpool_relevance(g: &PoolGeom, argmax: &[usize], upper: &[f64]) -> Vec<f64> {
    let mut r = vec![0.0; g.in_len()];
    for (o, &src) in argmax.iter().enumerate() {
        r[src] += upper[o];
    }
    r
}

fn avgpool_relevance(g: &PoolGeom, a: &[f64], upper: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; g.out_len()];
    kernels::avgpool_sample(a, g, &mut z);
    let c: Vec<f64> = z.iter().zip(upper).map(|(&zq, &rq)| if zq != 0.0 { rq / zq } else { 0.0 }).collect();
    let mut back = vec![0.0; g.in_len()];
    kernels::avgpool_backward_sample(&c, g, &mut back);
    back.iter().zip(a).map(|(b, ap)| b * ap).collect()
}

fn check_len(expected: &[usize], t: &Tensor) -> Result<()> {
    if t.len() != expected.iter().product::<usize>() {
        return Err(Error::ShapeMismatch {
            expected: expected.to_vec(),
            actual: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// One backward step through a single layer for one sample. `input` is the
/// layer's recorded input and `upper` the relevance on its output.
pub fn lrp_step(layer: &Layer, input: &Tensor, upper: &Tensor, params: &LrpParams) -> Result<Tensor> {
    params.validate()?;
    let in_shape = input.shape().to_vec();
    let out_shape = layer.spec.output_shape(&in_shape)?;
    check_len(&out_shape, upper)?;
    let a = input.data();
    let r = match layer.spec {
        LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. } => {
            Affine::from_layer(layer, &in_shape)?.alpha_beta(a, upper.data(), params)
        }
        LayerSpec::BatchNorm { .. } => batch_norm_alone(layer, &in_shape, a, upper.data(), params),
        LayerSpec::Relu | LayerSpec::Flatten => upper.data().to_vec(),
        LayerSpec::MaxPool { .. } => {
            let g = layer.pool_geom(&in_shape).expect("validated by output_shape");
            let mut out = vec![0.0; g.out_len()];
            let mut argmax = vec![0; g.out_len()];
            kernels::maxpool_sample(a, &g, &mut out, &mut argmax);
            maxpool_relevance(&g, &argmax, upper.data())
        }
        LayerSpec::AvgPool { .. } => {
            let g = layer.pool_geom(&in_shape).expect("validated by output_shape");
            avgpool_relevance(&g, a, upper.data())
        }
    };
    Tensor::new(in_shape, r)
}

/// Relevance maps keyed by layer id: `L` is the output, hidden ids refer to
/// their tap, `0` to the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    pub maps: BTreeMap<usize, Tensor>,
}

impl RelevanceMap {
    pub fn get(&self, id: usize) -> Option<&Tensor> {
        self.maps.get(&id)
    }
}

/// Position whose *input* carries the relevance of layer id `id`.
fn stop_position(net: &Network, id: usize) -> Result<usize> {
    let depth = net.depth();
    if id == 0 {
        Ok(0)
    } else if id == depth {
        Ok(net.layers().len())
    } else if id < depth {
        Ok(net.tap_position(id)? + 1)
    } else {
        Err(Error::LayerOutOfRange { id, depth })
    }
}

/// Propagates relevance for one sample down to every requested layer id in
/// a single backward pass. The output layer's map is always included.
pub fn relevance_at_layers(net: &Network, x: &Tensor, label: usize, ids: &[usize], params: &LrpParams) -> Result<RelevanceMap> {
    params.validate()?;
    let depth = net.depth();
    let mut stops: BTreeMap<usize, usize> = BTreeMap::new();
    for &id in ids {
        stops.insert(stop_position(net, id)?, id);
    }
    let lowest = stops.keys().next().copied().unwrap_or(net.layers().len());
    if x.shape() != net.input_shape() {
        return Err(Error::ShapeMismatch {
            expected: net.input_shape().to_vec(),
            actual: x.shape().to_vec(),
        });
    }
    let mut batch_shape = vec![1];
    batch_shape.extend_from_slice(x.shape());
    let n_layers = net.layers().len();
    let (_, trace, _) = net.run(
        Tensor::new(batch_shape, x.data().to_vec())?,
        0..n_layers,
        Mode::Eval,
        true,
        &[],
    );
    let trace = trace.expect("recorded");
    let shapes = net.output_shapes();
    let in_shape = |pos: usize| net.input_shape_of(pos, &shapes);

    let mut maps = BTreeMap::new();
    let mut r = Tensor::from_vec(output_relevance(label, net.num_classes())?);
    maps.insert(depth, r.clone());

    let layers = net.layers();
    let mut pos = n_layers;
    while pos > lowest {
        let p = pos - 1;
        let layer = &layers[p];
        let a = trace.inputs[p].data();
        let upper = r.data();
        let (next, consumed) = match &layer.spec {
            LayerSpec::BatchNorm { .. } if p > lowest && layers[p - 1].spec.is_weighted() => {
                let mut aff = Affine::from_layer(&layers[p - 1], &in_shape(p - 1))?;
                aff.fold_batch_norm(layer)?;
                (aff.alpha_beta(trace.inputs[p - 1].data(), upper, params), 2)
            }
            LayerSpec::BatchNorm { .. } => (batch_norm_alone(layer, &in_shape(p), a, upper, params), 1),
            LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. } => {
                (Affine::from_layer(layer, &in_shape(p))?.alpha_beta(a, upper, params), 1)
            }
            LayerSpec::Relu | LayerSpec::Flatten => (upper.to_vec(), 1),
            LayerSpec::MaxPool { .. } => {
                let g = layer.pool_geom(&in_shape(p)).expect("validated network");
                let Aux::Argmax(argmax) = &trace.aux[p] else {
                    unreachable!("max-pool records its argmax")
                };
                (maxpool_relevance(&g, argmax, upper), 1)
            }
            LayerSpec::AvgPool { .. } => {
                let g = layer.pool_geom(&in_shape(p)).expect("validated network");
                (avgpool_relevance(&g, a, upper), 1)
            }
        };
        pos -= consumed;
        r = Tensor::new(in_shape(pos), next)?;
        if let Some(&id) = stops.get(&pos) {
            maps.insert(id, r.clone());
        }
    }
    Ok(RelevanceMap { maps })
}

/// Relevance of one sample expressed on layer `id`'s activations.
pub fn relevance_at_layer(net: &Network, x: &Tensor, label: usize, id: usize, params: &LrpParams) -> Result<Tensor> {
    let mut m = relevance_at_layers(net, x, label, &[id], params)?;
    Ok(m.maps.remove(&id).expect("requested layer is present"))
}

/// Mean relevance per feature map of a `[r, H, W]` relevance tensor.
pub fn feature_map_relevance(map: &Tensor) -> Result<Vec<f64>> {
    if map.shape().len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "feature-map relevance needs a convolutional [r, H, W] map, got {:?}",
            map.shape()
        )));
    }
    let per = map.shape()[1] * map.shape()[2];
    Ok(map.data().chunks(per).map(|c| c.iter().sum::<f64>() / per as f64).collect())
}

/// Class-averaged feature-map relevance at one conv layer (`c x r`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScoreMatrix {
    pub layer: usize,
    pub rows: Vec<Vec<f64>>,
    pub class_counts: Vec<usize>,
}

impl RelevanceScoreMatrix {
    pub fn num_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn num_maps(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.rows[class]
    }

    pub fn is_finite(&self) -> bool {
        self.rows.iter().flatten().all(|v| v.is_finite())
    }
}

/// Builds the relevance matrices for several conv layers with one backward
/// pass per sample. Samples are processed in parallel; sums are taken in
/// sample order, so the result does not depend on the thread count.
pub fn relevance_score_matrices(
    net: &Network,
    data: &LabeledDataset,
    layers: &[usize],
    params: &LrpParams,
) -> Result<Vec<RelevanceScoreMatrix>> {
    params.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("relevance needs a non-empty training set".into()));
    }
    if data.num_classes() != net.num_classes() {
        return Err(Error::Dataset(format!(
            "dataset has {} classes, network has {}",
            data.num_classes(),
            net.num_classes()
        )));
    }
    for &l in layers {
        let shape = net.tap_shape(l)?;
        if shape.len() != 3 {
            return Err(Error::NotTappable {
                id: l,
                reason: "relevance matrices need a convolutional layer".into(),
            });
        }
    }
    let counts = data.class_counts();
    if let Some(class) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass { class });
    }

    let per_sample: Vec<Vec<Vec<f64>>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let m = relevance_at_layers(net, &data.input_tensor(i), data.label(i), layers, params)?;
            layers.iter().map(|l| feature_map_relevance(&m.maps[l])).collect()
        })
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(layers.len());
    for (li, &l) in layers.iter().enumerate() {
        let r = per_sample[0][li].len();
        let mut rows = vec![vec![0.0; r]; net.num_classes()];
        for (i, s) in per_sample.iter().enumerate() {
            rows[data.label(i)].iter_mut().zip(&s[li]).for_each(|(acc, v)| *acc += v);
        }
        for (row, &n) in rows.iter_mut().zip(&counts) {
            row.iter_mut().for_each(|v| *v /= n as f64);
        }
        let m = RelevanceScoreMatrix {
            layer: l,
            rows,
            class_counts: counts.clone(),
        };
        if !m.is_finite() {
            return Err(Error::InvalidArgument(format!("relevance matrix at layer {l} is not finite")));
        }
        out.push(m);
    }
    Ok(out)
}

pub fn relevance_score_matrix(
    net: &Network,
    data: &LabeledDataset,
    layer: usize,
    params: &LrpParams,
) -> Result<RelevanceScoreMatrix> {
    Ok(relevance_score_matrices(net, data, &[layer], params)?.remove(0))
}

/// Identifies a stored relevance matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixKey {
    pub model_hash: String,
    pub layer: usize,
    pub alpha: f64,
    pub beta: f64,
    pub dataset_tag: String,
}

impl MatrixKey {
    /// File-name-safe digest of the key.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(self).expect("plain struct");
        crate::nn::io::sha256_hex(text.as_bytes())[..16].to_string()
    }
}

/// A relevance matrix together with the key it was computed under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredMatrix {
    pub key: MatrixKey,
    pub matrix: RelevanceScoreMatrix,
}
