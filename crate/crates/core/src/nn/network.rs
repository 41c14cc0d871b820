use std::collections::BTreeMap;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layer::{Aux, Layer, LayerSpec, Mode, ParamGrads};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An ordered stack of layers ending in a length-`c` logit vector.
///
/// Weighted layers (conv and dense) are numbered `1..=L`; id `0` denotes the
/// input. A tap at layer `l` reads the activation after the batch-norm and
/// ReLU that follow weighted layer `l`, before any pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkRepr")]
pub struct Network {
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<Layer>,
}

#[derive(Deserialize)]
struct NetworkRepr {
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<Layer>,
}

impl TryFrom<NetworkRepr> for Network {
    type Error = Error;

    fn try_from(r: NetworkRepr) -> Result<Self> {
        let net = Network::new(r.input_shape, r.layers)?;
        if net.num_classes != r.num_classes {
            return Err(Error::InvalidNetwork(format!(
                "stored class count {} disagrees with layer shapes ({})",
                r.num_classes, net.num_classes
            )));
        }
        Ok(net)
    }
}

/// Recorded forward pass over a contiguous range of layers.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    pub start: usize,
    /// `inputs[i]` is the input of layer `start + i`.
    pub inputs: Vec<Tensor>,
    pub aux: Vec<Aux>,
    pub mode: Mode,
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidNetwork("network has no layers".into()));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidNetwork(format!("bad input shape {input_shape:?}")));
        }
        let mut shape = input_shape.clone();
        for layer in &layers {
            layer.check_params()?;
            shape = layer.spec.output_shape(&shape)?;
        }
        if shape.len() != 1 || shape[0] < 2 {
            return Err(Error::InvalidNetwork(format!(
                "final layer must produce a logit vector with at least 2 entries, got {shape:?}"
            )));
        }
        let net = Self {
            input_shape,
            num_classes: shape[0],
            layers,
        };
        if net.depth() == 0 {
            return Err(Error::InvalidNetwork("network has no weighted layers".into()));
        }
        Ok(net)
    }

    /// Builds a network from specs with He-style fan-in initialization.
    pub fn init(input_shape: Vec<usize>, specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .into_iter()
            .map(|spec| {
                let mut layer = Layer::zeroed(spec);
                let fan_in = match layer.spec {
                    LayerSpec::Conv2d {
                        in_channels, kernel, ..
                    } => in_channels * kernel * kernel,
                    LayerSpec::Dense { inputs, .. } => inputs,
                    _ => 0,
                };
                if fan_in > 0 {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    layer.params.weight.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
                }
                layer
            })
            .collect();
        Self::new(input_shape, layers)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    /// Number of weighted layers, `L`.
    pub fn depth(&self) -> usize {
        self.layers.iter().filter(|l| l.spec.is_weighted()).count()
    }

    /// Positions (indices into `layers`) of the weighted layers, in order.
    pub fn weighted_positions(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.spec.is_weighted())
            .map(|(i, _)| i)
            .collect()
    }

    /// Per-sample shape of every layer output; entry `i` is the output of layer `i`.
    pub fn output_shapes(&self) -> Vec<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        self.layers
            .iter()
            .map(|l| {
                shape = l.spec.output_shape(&shape).expect("validated network");
                shape.clone()
            })
            .collect()
    }

    /// Per-sample input shape of layer at `pos`.
    pub(crate) fn input_shape_of(&self, pos: usize, shapes: &[Vec<usize>]) -> Vec<usize> {
        if pos == 0 {
            self.input_shape.clone()
        } else {
            shapes[pos - 1].clone()
        }
    }

    /// Position of the last layer in the group {weighted, batch-norm?, relu?}
    /// that starts at weighted layer `id` (1-based).
    pub fn group_end(&self, id: usize) -> Result<usize> {
        let positions = self.weighted_positions();
        if id == 0 || id > positions.len() {
            return Err(Error::LayerOutOfRange {
                id,
                depth: positions.len(),
            });
        }
        let mut pos = positions[id - 1];
        if matches!(self.layers.get(pos + 1).map(|l| &l.spec), Some(LayerSpec::BatchNorm { .. })) {
            pos += 1;
        }
        if matches!(self.layers.get(pos + 1).map(|l| &l.spec), Some(LayerSpec::Relu)) {
            pos += 1;
        }
        Ok(pos)
    }

    /// Position whose output is the tap of hidden layer `id` (`1 <= id < L`).
    pub fn tap_position(&self, id: usize) -> Result<usize> {
        let depth = self.depth();
        if id == 0 || id >= depth {
            return Err(Error::LayerOutOfRange { id, depth });
        }
        let pos = self.group_end(id)?;
        if self.layers[pos].spec != LayerSpec::Relu {
            return Err(Error::NotTappable {
                id,
                reason: "weighted layer is not followed by a ReLU".into(),
            });
        }
        Ok(pos)
    }

    /// Per-sample shape of the tap at hidden layer `id`.
    pub fn tap_shape(&self, id: usize) -> Result<Vec<usize>> {
        let pos = self.tap_position(id)?;
        Ok(self.output_shapes()[pos].clone())
    }

    /// Is weighted layer `id` a convolution?
    pub fn is_conv(&self, id: usize) -> bool {
        self.weighted_positions()
            .get(id.wrapping_sub(1))
            .is_some_and(|&p| matches!(self.layers[p].spec, LayerSpec::Conv2d { .. }))
    }

    fn check_sample(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: self.input_shape.clone(),
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn batch_of_one(x: &Tensor) -> Tensor {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        Tensor::new(shape, x.data().to_vec()).expect("same length")
    }

    fn strip_batch(t: Tensor) -> Tensor {
        let shape = t.shape()[1..].to_vec();
        t.reshape(&shape).expect("batch of one")
    }

    /// Runs layers `range` on a batch, collecting outputs at `tap_positions`.
    pub(crate) fn run(
        &self,
        x: Tensor,
        range: Range<usize>,
        mode: Mode,
        record: bool,
        tap_positions: &[usize],
    ) -> (Tensor, Option<Trace>, BTreeMap<usize, Tensor>) {
        let shapes = self.output_shapes();
        let mut trace = record.then(|| Trace {
            start: range.start,
            inputs: Vec::with_capacity(range.len()),
            aux: Vec::with_capacity(range.len()),
            mode,
        });
        let mut taps = BTreeMap::new();
        let mut act = x;
        for pos in range {
            let in_shape = self.input_shape_of(pos, &shapes);
            let (out, aux) = self.layers[pos].forward(&act, &in_shape, &shapes[pos], mode);
            if let Some(t) = trace.as_mut() {
                t.inputs.push(act);
                t.aux.push(aux);
            }
            if tap_positions.contains(&pos) {
                taps.insert(pos, out.clone());
            }
            act = out;
        }
        (act, trace, taps)
    }

    /// Backpropagates `grad_out` through a recorded trace. `tap_grads` adds
    /// extra gradient at the output of the given positions.
    pub(crate) fn backward(
        &self,
        trace: &Trace,
        grad_out: Tensor,
        tap_grads: &[(usize, Tensor)],
        want_params: bool,
    ) -> (Tensor, Vec<ParamGrads>) {
        let shapes = self.output_shapes();
        let mut grad = grad_out;
        let mut param_grads = vec![ParamGrads::default(); trace.inputs.len()];
        for i in (0..trace.inputs.len()).rev() {
            let pos = trace.start + i;
            for (p, g) in tap_grads {
                if *p == pos {
                    grad.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
            }
            let in_shape = self.input_shape_of(pos, &shapes);
            let (gin, pg) =
                self.layers[pos].backward(&trace.inputs[i], &in_shape, &trace.aux[i], &grad, trace.mode, want_params);
            if let Some(pg) = pg {
                param_grads[i] = pg;
            }
            grad = gin;
        }
        (grad, param_grads)
    }

    /// Logits for one input sample.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_sample(x)?;
        let (out, _, _) = self.run(Self::batch_of_one(x), 0..self.layers.len(), Mode::Eval, false, &[]);
        Ok(Self::strip_batch(out))
    }

    /// Logits `[N, c]` for a batch `[N, ..input_shape]`.
    pub fn forward_batch(&self, xs: &Tensor) -> Result<Tensor> {
        if xs.shape().len() != self.input_shape.len() + 1 || xs.shape()[1..] != self.input_shape[..] {
            let mut expected = vec![xs.shape().first().copied().unwrap_or(1)];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::ShapeMismatch {
                expected,
                actual: xs.shape().to_vec(),
            });
        }
        let (out, _, _) = self.run(xs.clone(), 0..self.layers.len(), Mode::Eval, false, &[]);
        Ok(out)
    }

    /// Logits plus the post-BN-post-ReLU activations of the requested hidden layers.
    pub fn forward_with_taps(&self, x: &Tensor, tap_ids: &[usize]) -> Result<(Tensor, BTreeMap<usize, Tensor>)> {
        self.check_sample(x)?;
        let positions = tap_ids
            .iter()
            .map(|&id| self.tap_position(id))
            .collect::<Result<Vec<_>>>()?;
        let (out, _, taps) = self.run(Self::batch_of_one(x), 0..self.layers.len(), Mode::Eval, false, &positions);
        Ok((Self::strip_batch(out), self.rekey_taps(tap_ids, &positions, taps)))
    }

    /// Batched form of [`Network::forward_with_taps`]: logits `[N, c]` and taps `[N, ..]`.
    pub fn forward_batch_with_taps(&self, xs: &Tensor, tap_ids: &[usize]) -> Result<(Tensor, BTreeMap<usize, Tensor>)> {
        if xs.shape().len() != self.input_shape.len() + 1 || xs.shape()[1..] != self.input_shape[..] {
            return Err(Error::ShapeMismatch {
                expected: self.input_shape.clone(),
                actual: xs.shape().get(1..).unwrap_or(&[]).to_vec(),
            });
        }
        let positions = tap_ids
            .iter()
            .map(|&id| self.tap_position(id))
            .collect::<Result<Vec<_>>>()?;
        let (out, _, taps) = self.run(xs.clone(), 0..self.layers.len(), Mode::Eval, false, &positions);
        let taps = tap_ids.iter().zip(&positions).map(|(&id, p)| (id, taps[p].clone())).collect();
        Ok((out, taps))
    }

    /// Runs the network only up to the tap of hidden layer `until`, returning
    /// that activation and the taps of `tap_ids` (all `<= until`).
    pub fn forward_until(&self, x: &Tensor, until: usize, tap_ids: &[usize]) -> Result<(Tensor, BTreeMap<usize, Tensor>)> {
        self.check_sample(x)?;
        let end = self.tap_position(until)?;
        let positions = tap_ids
            .iter()
            .map(|&id| {
                let p = self.tap_position(id)?;
                if p > end {
                    return Err(Error::InvalidArgument(format!("tap {id} lies beyond layer {until}")));
                }
                Ok(p)
            })
            .collect::<Result<Vec<_>>>()?;
        let (out, _, taps) = self.run(Self::batch_of_one(x), 0..end + 1, Mode::Eval, false, &positions);
        Ok((Self::strip_batch(out), self.rekey_taps(tap_ids, &positions, taps)))
    }

    /// Continues a forward pass from the tap of hidden layer `from` to the logits.
    pub fn forward_from(&self, activation: &Tensor, from: usize) -> Result<Tensor> {
        let start = self.tap_position(from)?;
        let expected = self.output_shapes()[start].clone();
        if activation.shape() != expected.as_slice() {
            return Err(Error::ShapeMismatch {
                expected,
                actual: activation.shape().to_vec(),
            });
        }
        let (out, _, _) = self.run(
            Self::batch_of_one(activation),
            start + 1..self.layers.len(),
            Mode::Eval,
            false,
            &[],
        );
        Ok(Self::strip_batch(out))
    }

    fn rekey_taps(&self, ids: &[usize], positions: &[usize], taps: BTreeMap<usize, Tensor>) -> BTreeMap<usize, Tensor> {
        ids.iter()
            .zip(positions)
            .map(|(&id, p)| (id, Self::strip_batch(taps[p].clone())))
            .collect()
    }

    /// Outputs of every layer for one sample (inference mode). Entry `i` is
    /// the output of layer `i`; the input itself is not included.
    pub fn layer_outputs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_sample(x)?;
        let positions: Vec<usize> = (0..self.layers.len()).collect();
        let (_, _, taps) = self.run(Self::batch_of_one(x), 0..self.layers.len(), Mode::Eval, false, &positions);
        Ok(taps.into_values().map(Self::strip_batch).collect())
    }

    /// Gradient of a scalar of the logits and taps w.r.t. the input.
    ///
    /// `loss` receives the logits and the requested taps and returns the loss
    /// value, its gradient w.r.t. the logits, and gradients w.r.t. any taps.
    pub fn input_gradient_with<F>(&self, x: &Tensor, tap_ids: &[usize], loss: F) -> Result<(f64, Tensor)>
    where
        F: FnOnce(&Tensor, &BTreeMap<usize, Tensor>) -> Result<(f64, Tensor, BTreeMap<usize, Tensor>)>,
    {
        self.check_sample(x)?;
        let positions = tap_ids
            .iter()
            .map(|&id| self.tap_position(id))
            .collect::<Result<Vec<_>>>()?;
        let (out, trace, taps) = self.run(Self::batch_of_one(x), 0..self.layers.len(), Mode::Eval, true, &positions);
        let logits = Self::strip_batch(out);
        let taps = self.rekey_taps(tap_ids, &positions, taps);
        let (value, dlogits, tap_grads) = loss(&logits, &taps)?;
        if dlogits.len() != self.num_classes {
            return Err(Error::ShapeMismatch {
                expected: vec![self.num_classes],
                actual: dlogits.shape().to_vec(),
            });
        }
        let mut injected = Vec::with_capacity(tap_grads.len());
        for (id, g) in tap_grads {
            let pos = self.tap_position(id)?;
            if !positions.contains(&pos) {
                return Err(Error::NotTappable {
                    id,
                    reason: "gradient supplied for a tap that was not requested".into(),
                });
            }
            if Some(g.shape()) != taps.get(&id).map(Tensor::shape) {
                return Err(Error::ShapeMismatch {
                    expected: taps[&id].shape().to_vec(),
                    actual: g.shape().to_vec(),
                });
            }
            injected.push((pos, Self::batch_of_one(&g)));
        }
        let (gin, _) = self.backward(
            trace.as_ref().expect("recorded"),
            Self::batch_of_one(&dlogits),
            &injected,
            false,
        );
        Ok((value, Self::strip_batch(gin)))
    }
}
