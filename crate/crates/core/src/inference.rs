//! Early-exit inference with auxiliary cells and FLOPs accounting.
//!
//! The cells at the validation layers must agree on a class. If they do and
//! every cell is confident (probability strictly above `delta_th`), the
//! network stops there. If they agree without enough confidence the
//! remaining layers run and must confirm the label. Any disagreement ends in
//! a no-decision verdict.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Network};
use crate::rac::{Rac, RacOutput};
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferencePolicy {
    /// Hidden layer ids hosting a cell, strictly increasing.
    pub layers: Vec<usize>,
    pub delta_th: f64,
}

impl InferencePolicy {
    pub fn new(layers: Vec<usize>, delta_th: f64) -> Result<Self> {
        let p = Self { layers, delta_th };
        p.validate(None)?;
        Ok(p)
    }

    /// Checks the invariants; with `depth` also checks that every layer is hidden.
    pub fn validate(&self, depth: Option<usize>) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta_th) {
            return Err(Error::InvalidArgument(format!(
                "delta_th must lie in [0, 1], got {}",
                self.delta_th
            )));
        }
        if self.layers.len() < 2 {
            return Err(Error::InvalidArgument("at least two validation layers are required".into()));
        }
        if self.layers.windows(2).any(|w| w[0] >= w[1]) || self.layers[0] == 0 {
            return Err(Error::InvalidArgument(format!(
                "validation layers must be positive and strictly increasing, got {:?}",
                self.layers
            )));
        }
        if let Some(d) = depth {
            if let Some(&l) = self.layers.iter().find(|&&l| l >= d) {
                return Err(Error::LayerOutOfRange { id: l, depth: d });
            }
        }
        Ok(())
    }

    pub fn last_layer(&self) -> usize {
        *self.layers.last().expect("validated non-empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "label", rename_all = "snake_case")]
pub enum Verdict {
    Classified(usize),
    NoDecision,
}

impl Verdict {
    pub fn label(&self) -> Option<usize> {
        match self {
            Verdict::Classified(c) => Some(*c),
            Verdict::NoDecision => None,
        }
    }

    pub fn is_nd(&self) -> bool {
        matches!(self, Verdict::NoDecision)
    }
}

/// Cost and exit layer of the two possible paths through the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathCosts {
    pub early_layer: usize,
    pub early_flops: u64,
    pub full_layer: usize,
    pub full_flops: u64,
}

impl PathCosts {
    pub fn new(net: &Network, racs: &[Rac], policy: &InferencePolicy) -> Result<Self> {
        Ok(Self {
            early_layer: policy.last_layer(),
            early_flops: flops_of(net, policy.last_layer(), Some(racs))?,
            full_layer: net.depth(),
            full_flops: flops_of(net, net.depth(), Some(racs))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    #[serde(flatten)]
    pub verdict: Verdict,
    pub exit_layer: usize,
    pub early: bool,
    pub flops: u64,
    pub rac_classes: Vec<usize>,
    pub rac_probs: Vec<f64>,
}

/// Applies the decision rule to the cell outputs. `final_layers` runs the
/// rest of the network and is invoked only when the cells agree without
/// enough confidence.
pub fn decide<F>(outputs: &[RacOutput], policy: &InferencePolicy, costs: &PathCosts, final_layers: F) -> Result<Outcome>
where
    F: FnOnce() -> Result<usize>,
{
    let first = outputs
        .first()
        .ok_or_else(|| Error::InvalidArgument("decide needs at least one cell output".into()))?;
    let rac_classes: Vec<usize> = outputs.iter().map(|o| o.class).collect();
    let rac_probs: Vec<f64> = outputs.iter().map(|o| o.prob).collect();
    let early = |verdict| Outcome {
        verdict,
        exit_layer: costs.early_layer,
        early: true,
        flops: costs.early_flops,
        rac_classes: rac_classes.clone(),
        rac_probs: rac_probs.clone(),
    };
    let agreed = first.class;
    if outputs.iter().any(|o| o.class != agreed) {
        return Ok(early(Verdict::NoDecision));
    }
    if outputs.iter().all(|o| o.prob > policy.delta_th) {
        return Ok(early(Verdict::Classified(agreed)));
    }
    let fc = final_layers()?;
    let verdict = if fc == agreed {
        Verdict::Classified(fc)
    } else {
        Verdict::NoDecision
    };
    Ok(Outcome {
        verdict,
        exit_layer: costs.full_layer,
        early: false,
        flops: costs.full_flops,
        rac_classes,
        rac_probs,
    })
}

/// Checks that the cells line up with the policy layers and the network.
pub fn check_racs(net: &Network, racs: &[Rac], policy: &InferencePolicy) -> Result<()> {
    policy.validate(Some(net.depth()))?;
    if racs.len() != policy.layers.len() || racs.iter().zip(&policy.layers).any(|(r, &l)| r.layer != l) {
        return Err(Error::InvalidArgument(format!(
            "cells at layers {:?} do not match policy layers {:?}",
            racs.iter().map(|r| r.layer).collect::<Vec<_>>(),
            policy.layers
        )));
    }
    for r in racs {
        if r.num_classes() != net.num_classes() || net.tap_shape(r.layer)? != r.tap_shape {
            return Err(Error::InvalidArgument(format!(
                "cell at layer {} was not built for this network",
                r.layer
            )));
        }
    }
    Ok(())
}

/// Runs the network to the last validation layer, evaluates the cells, and
/// finishes the forward pass only if the decision needs it.
pub fn infer(net: &Network, racs: &[Rac], policy: &InferencePolicy, x: &Tensor) -> Result<Outcome> {
    check_racs(net, racs, policy)?;
    let costs = PathCosts::new(net, racs, policy)?;
    infer_with_costs(net, racs, policy, &costs, x)
}

/// [`infer`] with precomputed path costs and without re-checking the cells.
pub fn infer_with_costs(net: &Network, racs: &[Rac], policy: &InferencePolicy, costs: &PathCosts, x: &Tensor) -> Result<Outcome> {
    let last = policy.last_layer();
    let (act, taps) = net.forward_until(x, last, &policy.layers)?;
    let outputs = racs
        .iter()
        .map(|r| r.forward(&taps[&r.layer]))
        .collect::<Result<Vec<_>>>()?;
    decide(&outputs, policy, costs, || Ok(argmax(net.forward_from(&act, last)?.data())))
}

/// FLOPs of one layer for a per-sample input shape.
pub fn layer_flops(spec: &LayerSpec, input: &[usize]) -> Result<u64> {
    let out = spec.output_shape(input)?;
    let out_len: usize = out.iter().product();
    Ok(match *spec {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            ..
        } => {
            let pixels = out[1] * out[2];
            (2 * out_channels * pixels * in_channels * kernel * kernel + out_channels * pixels) as u64
        }
        LayerSpec::Dense { inputs, outputs } => (2 * inputs * outputs + outputs) as u64,
        LayerSpec::BatchNorm { .. } => 2 * out_len as u64,
        LayerSpec::Relu | LayerSpec::MaxPool { .. } | LayerSpec::AvgPool { .. } => out_len as u64,
        LayerSpec::Flatten => 0,
    })
}

/// FLOPs of one auxiliary cell: `c * (2 * k * H * W + 1)`.
pub fn rac_flops(rac: &Rac) -> u64 {
    (rac.num_classes() * (2 * rac.input_width() + 1)) as u64
}

/// FLOPs of the network up to and including layer `up_to` (its tap for a
/// hidden layer, the logits for `L`, nothing for `0`), plus the given cells.
pub fn flops_of(net: &Network, up_to: usize, racs: Option<&[Rac]>) -> Result<u64> {
    let depth = net.depth();
    let end = match up_to {
        0 => 0,
        l if l == depth => net.layers().len(),
        l if l < depth => net.group_end(l)? + 1,
        l => return Err(Error::LayerOutOfRange { id: l, depth }),
    };
    let mut shape = net.input_shape().to_vec();
    let mut total = 0;
    for layer in &net.layers()[..end] {
        total += layer_flops(&layer.spec, &shape)?;
        shape = layer.spec.output_shape(&shape)?;
    }
    Ok(total + racs.unwrap_or(&[]).iter().map(rac_flops).sum::<u64>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub avg_flops_baseline: f64,
    pub avg_flops_rac_system: f64,
    pub normalized_flops: f64,
    pub early_exit_fraction: f64,
}

/// Aggregates per-sample costs against the full-network baseline cost.
pub fn flops_summary(outcomes: &[Outcome], baseline_flops: u64) -> Result<FlopsReport> {
    if outcomes.is_empty() {
        return Err(Error::InvalidArgument("no outcomes to summarize".into()));
    }
    let n = outcomes.len() as f64;
    let avg = outcomes.iter().map(|o| o.flops as f64).sum::<f64>() / n;
    Ok(FlopsReport {
        avg_flops_baseline: baseline_flops as f64,
        avg_flops_rac_system: avg,
        normalized_flops: baseline_flops as f64 / avg,
        early_exit_fraction: outcomes.iter().filter(|o| o.early).count() as f64 / n,
    })
}

pub fn flops_report(net: &Network, racs: &[Rac], policy: &InferencePolicy, inputs: &[Tensor]) -> Result<FlopsReport> {
    check_racs(net, racs, policy)?;
    let costs = PathCosts::new(net, racs, policy)?;
    let outcomes = inputs
        .iter()
        .map(|x| infer_with_costs(net, racs, policy, &costs, x))
        .collect::<Result<Vec<_>>>()?;
    flops_summary(&outcomes, flops_of(net, net.depth(), None)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn out(class: usize, prob: f64) -> RacOutput {
        let mut probs = vec![0.0; 10];
        probs[class] = prob;
        RacOutput { class, prob, probs }
    }

    const COSTS: PathCosts = PathCosts {
        early_layer: 6,
        early_flops: 100,
        full_layer: 9,
        full_flops: 300,
    };

    #[test]
    fn confident_agreement_exits_early() {
        let p = InferencePolicy::new(vec![5, 6], 0.9).unwrap();
        let calls = Cell::new(0);
        let o = decide(&[out(3, 0.95), out(3, 0.97)], &p, &COSTS, || {
            calls.set(calls.get() + 1);
            Ok(3)
        })
        .unwrap();
        assert_eq!(o.verdict, Verdict::Classified(3));
        assert!(o.early);
        assert_eq!((o.exit_layer, o.flops), (6, 100));
        assert_eq!(calls.get(), 0);
    }

    #[test]
    fn disagreement_is_no_decision_without_running_the_tail() {
        let p = InferencePolicy::new(vec![5, 6], 0.9).unwrap();
        let calls = Cell::new(0);
        let o = decide(&[out(1, 0.99), out(2, 0.99)], &p, &COSTS, || {
            calls.set(calls.get() + 1);
            Ok(1)
        })
        .unwrap();
        assert_eq!(o.verdict, Verdict::NoDecision);
        assert!(o.early);
        assert_eq!(calls.get(), 0);
    }

    #[test]
    fn unconfident_agreement_defers_to_the_final_layer() {
        let p = InferencePolicy::new(vec![5, 6], 0.9).unwrap();
        let o = decide(&[out(5, 0.6), out(5, 0.95)], &p, &COSTS, || Ok(7)).unwrap();
        assert_eq!(o.verdict, Verdict::NoDecision);
        assert!(!o.early);
        assert_eq!((o.exit_layer, o.flops), (9, 300));
        let o = decide(&[out(5, 0.6), out(5, 0.95)], &p, &COSTS, || Ok(5)).unwrap();
        assert_eq!(o.verdict, Verdict::Classified(5));
        assert!(!o.early);
    }

    #[test]
    fn threshold_is_strict() {
        let p = InferencePolicy::new(vec![5, 6], 0.9).unwrap();
        let o = decide(&[out(2, 0.9), out(2, 0.99)], &p, &COSTS, || Ok(2)).unwrap();
        assert!(!o.early);
    }

    #[test]
    fn policy_validation() {
        assert!(InferencePolicy::new(vec![5], 0.5).is_err());
        assert!(InferencePolicy::new(vec![6, 5], 0.5).is_err());
        assert!(InferencePolicy::new(vec![5, 6], 1.5).is_err());
        let p = InferencePolicy::new(vec![5, 9], 0.5).unwrap();
        assert!(p.validate(Some(9)).is_err());
        assert!(decide(&[], &p, &COSTS, || Ok(0)).is_err());
    }

    #[test]
    fn conv_flops_closed_form() {
        let spec = LayerSpec::Conv2d {
            in_channels: 2,
            out_channels: 4,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        assert_eq!(layer_flops(&spec, &[2, 8, 8]).unwrap(), 9_472);
    }
}
