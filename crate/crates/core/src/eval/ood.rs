use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{check_racs, infer_with_costs, InferencePolicy, Outcome, PathCosts};
use crate::nn::Network;
use crate::rac::Rac;
use crate::tensor::Tensor;

/// Every out-of-distribution input is a negative; TNR is the percentage
/// that ends in no decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub source: String,
    pub total: usize,
    pub no_decision: usize,
    pub tnr: f64,
    pub early_exit_pct: f64,
}

pub fn ood_report(source: &str, outcomes: &[Outcome]) -> Result<OodReport> {
    if outcomes.is_empty() {
        return Err(Error::InvalidArgument(format!("OOD source {source:?} has no samples")));
    }
    let n = outcomes.len();
    let nd = outcomes.iter().filter(|o| o.verdict.is_nd()).count();
    let early = outcomes.iter().filter(|o| o.early).count();
    Ok(OodReport {
        source: source.to_string(),
        total: n,
        no_decision: nd,
        tnr: 100.0 * nd as f64 / n as f64,
        early_exit_pct: 100.0 * early as f64 / n as f64,
    })
}

pub fn ood_eval(net: &Network, racs: &[Rac], policy: &InferencePolicy, source: &str, inputs: &[Tensor]) -> Result<OodReport> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument(format!("OOD source {source:?} has no samples")));
    }
    check_racs(net, racs, policy)?;
    let costs = PathCosts::new(net, racs, policy)?;
    let outcomes = inputs
        .iter()
        .map(|x| infer_with_costs(net, racs, policy, &costs, x))
        .collect::<Result<Vec<_>>>()?;
    ood_report(source, &outcomes)
}
