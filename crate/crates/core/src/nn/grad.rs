use std::collections::BTreeMap;

use super::network::Network;
use super::train::softmax_cross_entropy;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A differentiable scalar of the logits.
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    Constant(f64),
    /// The raw logit of one class.
    Logit(usize),
    /// `sum_i weights[i] * logit_i`.
    LinearLogits(Vec<f64>),
    CrossEntropy(usize),
    /// Targeted margin `max(max_{i != target} z_i - z_target, -kappa)`.
    Margin { target: usize, kappa: f64 },
}

impl LossSpec {
    /// Value and gradient w.r.t. the logits.
    pub fn evaluate(&self, logits: &Tensor) -> Result<(f64, Tensor)> {
        let z = logits.data();
        let c = z.len();
        let check = |i: usize| {
            if i < c {
                Ok(())
            } else {
                Err(Error::LabelOutOfRange { label: i, classes: c })
            }
        };
        let mut grad = vec![0.0; c];
        let value = match self {
            LossSpec::Constant(v) => *v,
            LossSpec::Logit(i) => {
                check(*i)?;
                grad[*i] = 1.0;
                z[*i]
            }
            LossSpec::LinearLogits(w) => {
                if w.len() != c {
                    return Err(Error::ShapeMismatch {
                        expected: vec![c],
                        actual: vec![w.len()],
                    });
                }
                grad.copy_from_slice(w);
                crate::tensor::dot(w, z)
            }
            LossSpec::CrossEntropy(y) => {
                check(*y)?;
                let batch = Tensor::new(vec![1, c], z.to_vec())?;
                let (l, g, _) = softmax_cross_entropy(&batch, &[*y]);
                grad.copy_from_slice(g.data());
                l
            }
            LossSpec::Margin { target, kappa } => {
                check(*target)?;
                let (other, best) = z
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| i != target)
                    .fold((usize::MAX, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
                let m = best - z[*target];
                if m > -kappa {
                    grad[other] = 1.0;
                    grad[*target] = -1.0;
                    m
                } else {
                    -kappa
                }
            }
        };
        Ok((value, Tensor::new(logits.shape().to_vec(), grad)?))
    }
}

/// `(loss, d loss / d x)` for one input sample.
pub fn input_gradient(net: &Network, x: &Tensor, loss: &LossSpec) -> Result<(f64, Tensor)> {
    net.input_gradient_with(x, &[], |logits, _| {
        let (v, g) = loss.evaluate(logits)?;
        Ok((v, g, BTreeMap::new()))
    })
}
