use anyhow::Result;
use log::info;
use racnet_core::data::LabeledDataset;
use racnet_core::eval::{detection_metrics, match_fnr, msr_confidence, msr_rates, DetectionReport, MsrMatch};
use racnet_core::inference::{
    flops_of, flops_summary, infer_with_costs, FlopsReport, InferencePolicy, Outcome, PathCosts, Verdict,
};
use racnet_core::nn::Network;
use racnet_core::rac::Rac;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train_racs::RacArtifact;
use super::{logits_of, predictions, write_summary, Context, Splits};
use crate::artifacts::{opt_pct, pct, write_json, write_jsonl, Provenance, Table};

/// Allowed FNR gap for the softmax-confidence comparison, in points.
pub const MSR_FNR_TOLERANCE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub index: usize,
    pub true_label: usize,
    pub baseline: usize,
    pub msr_confidence: f64,
    #[serde(flatten)]
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsrComparison {
    /// Threshold matched to the system's FNR on the test split itself.
    pub matched_on_test: MsrMatch,
    /// Threshold matched on the validation split, then applied to test.
    pub matched_on_validation: MsrMatch,
    pub validation_calibrated_test_tnr: Option<f64>,
    pub validation_calibrated_test_fnr: Option<f64>,
    pub rac_tnr: Option<f64>,
    pub rac_fnr: Option<f64>,
    pub rac_normalized_flops: f64,
    /// The softmax detector always runs the full network.
    pub msr_normalized_flops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub provenance: Provenance,
    pub baseline_only: bool,
    pub test_size: usize,
    pub baseline_accuracy: f64,
    pub baseline_error: f64,
    pub policy: Option<InferencePolicy>,
    pub k: Option<usize>,
    pub baseline_params: usize,
    pub added_params: usize,
    pub detection: DetectionReport,
    pub flops: FlopsReport,
    pub msr: Option<MsrComparison>,
}

/// Runs the early-exit system over every sample of `data`.
pub fn system_outcomes(net: &Network, racs: &[Rac], policy: &InferencePolicy, data: &LabeledDataset) -> Result<Vec<Outcome>> {
    let costs = PathCosts::new(net, racs, policy)?;
    let outcomes = (0..data.len())
        .into_par_iter()
        .map(|i| infer_with_costs(net, racs, policy, &costs, &data.input_tensor(i)))
        .collect::<racnet_core::Result<Vec<_>>>()?;
    Ok(outcomes)
}

pub fn run(
    ctx: &Context,
    net: &Network,
    model_hash: &str,
    splits: &Splits,
    racs: Option<&RacArtifact>,
) -> Result<(EvalReport, Vec<OutcomeRow>)> {
    let test = &splits.test;
    let logits = logits_of(net, test)?;
    let baseline = predictions(&logits);
    let confidence: Vec<f64> = logits.iter().map(|l| msr_confidence(l)).collect();
    let baseline_flops = flops_of(net, net.depth(), None)?;

    let outcomes = match racs {
        Some(a) => {
            info!("running the early-exit system over {} test samples", test.len());
            system_outcomes(net, &a.bundle.racs, &a.policy, test)?
        }
        None => baseline
            .iter()
            .map(|&b| Outcome {
                verdict: Verdict::Classified(b),
                exit_layer: net.depth(),
                early: false,
                flops: baseline_flops,
                rac_classes: Vec::new(),
                rac_probs: Vec::new(),
            })
            .collect(),
    };
    let detection = detection_metrics(&baseline, test.labels(), &outcomes)?;
    let flops = flops_summary(&outcomes, baseline_flops)?;

    let msr = match racs {
        Some(a) => Some(msr_comparison(net, a, splits, &baseline, &confidence, &detection, &flops)?),
        None => None,
    };
    let correct = baseline.iter().zip(test.labels()).filter(|(b, y)| b == y).count();
    let baseline_accuracy = 100.0 * correct as f64 / test.len() as f64;
    let report = EvalReport {
        provenance: Provenance {
            config_hash: ctx.cfg.hash(),
            training_key: ctx.cfg.training_key(),
            dataset_hash: splits.hash(),
            model_hash: Some(model_hash.to_string()),
            racs_hash: racs.map(RacArtifact::hash),
        },
        baseline_only: racs.is_none(),
        test_size: test.len(),
        baseline_accuracy,
        baseline_error: 100.0 - baseline_accuracy,
        policy: racs.map(|a| a.policy.clone()),
        k: racs.map(|a| a.k),
        baseline_params: net.num_params(),
        added_params: racs.map_or(0, |a| a.bundle.param_count()),
        detection,
        flops,
        msr,
    };
    let rows: Vec<OutcomeRow> = outcomes
        .into_iter()
        .enumerate()
        .map(|(i, outcome)| OutcomeRow {
            index: i,
            true_label: test.label(i),
            baseline: baseline[i],
            msr_confidence: confidence[i],
            outcome,
        })
        .collect();

    let dir = ctx.run.stage(if racs.is_some() { "eval" } else { "eval_baseline" });
    write_jsonl(&dir.join("outcomes.jsonl"), &rows)?;
    write_json(&dir.join("report.json"), &report)?;
    write_summary(&dir.join("summary.txt"), &summary(&report))?;
    Ok((report, rows))
}

fn msr_comparison(
    net: &Network,
    a: &RacArtifact,
    splits: &Splits,
    baseline: &[usize],
    confidence: &[f64],
    detection: &DetectionReport,
    flops: &FlopsReport,
) -> Result<MsrComparison> {
    let positive: Vec<bool> = baseline.iter().zip(splits.test.labels()).map(|(b, y)| b == y).collect();
    let rac_fnr = detection.fnr.unwrap_or(0.0);
    let matched_on_test = match_fnr(confidence, &positive, rac_fnr, MSR_FNR_TOLERANCE)?;

    let val = &splits.validation;
    let val_logits = logits_of(net, val)?;
    let val_pred = predictions(&val_logits);
    let val_conf: Vec<f64> = val_logits.iter().map(|l| msr_confidence(l)).collect();
    let val_pos: Vec<bool> = val_pred.iter().zip(val.labels()).map(|(b, y)| b == y).collect();
    let val_outcomes = system_outcomes(net, &a.bundle.racs, &a.policy, val)?;
    let val_detection = detection_metrics(&val_pred, val.labels(), &val_outcomes)?;
    let matched_on_validation = match_fnr(&val_conf, &val_pos, val_detection.fnr.unwrap_or(0.0), MSR_FNR_TOLERANCE)?;
    let (tnr, fnr) = msr_rates(confidence, &positive, matched_on_validation.threshold);

    Ok(MsrComparison {
        matched_on_test,
        matched_on_validation,
        validation_calibrated_test_tnr: tnr,
        validation_calibrated_test_fnr: fnr,
        rac_tnr: detection.tnr,
        rac_fnr: detection.fnr,
        rac_normalized_flops: flops.normalized_flops,
        msr_normalized_flops: 1.0,
    })
}

pub fn summary(r: &EvalReport) -> String {
    let d = &r.detection;
    let mut out = String::new();
    out.push_str(&format!(
        "test samples {}, baseline accuracy {:.2} %, baseline error {:.2} %\n",
        r.test_size, r.baseline_accuracy, r.baseline_error
    ));
    if let (Some(p), Some(k)) = (&r.policy, r.k) {
        out.push_str(&format!(
            "cells at layers {:?}, k = {k}, delta_th = {}, added parameters {} ({:.2} % of {})\n",
            p.layers,
            p.delta_th,
            r.added_params,
            100.0 * r.added_params as f64 / r.baseline_params as f64,
            r.baseline_params
        ));
    } else {
        out.push_str("baseline only (no auxiliary cells)\n");
    }
    out.push('\n');
    let mut t = Table::new(&["TNR %", "FNR %", "correct %", "ND %", "bad %", "good %"]);
    t.row(&[
        opt_pct(d.tnr),
        opt_pct(d.fnr),
        pct(d.pct_correct),
        pct(d.pct_nd),
        pct(d.pct_bad),
        pct(d.pct_good()),
    ]);
    out.push_str(&t.render());
    out.push('\n');
    let f = &r.flops;
    let mut t = Table::new(&["baseline FLOPs", "system FLOPs", "normalized", "early exit %"]);
    t.row(&[
        format!("{:.0}", f.avg_flops_baseline),
        format!("{:.0}", f.avg_flops_rac_system),
        format!("{:.3}", f.normalized_flops),
        pct(100.0 * f.early_exit_fraction),
    ]);
    out.push_str(&t.render());
    if let Some(m) = &r.msr {
        out.push('\n');
        let mut t = Table::new(&["detector", "threshold from", "TNR %", "FNR %", "normalized FLOPs", "comparable"]);
        t.row(&[
            "cells".to_string(),
            "-".to_string(),
            opt_pct(m.rac_tnr),
            opt_pct(m.rac_fnr),
            format!("{:.3}", m.rac_normalized_flops),
            "-".to_string(),
        ]);
        t.row(&[
            "softmax".to_string(),
            "test".to_string(),
            opt_pct(m.matched_on_test.tnr),
            pct(m.matched_on_test.fnr),
            format!("{:.3}", m.msr_normalized_flops),
            m.matched_on_test.comparable.to_string(),
        ]);
        t.row(&[
            "softmax".to_string(),
            "validation".to_string(),
            opt_pct(m.validation_calibrated_test_tnr),
            opt_pct(m.validation_calibrated_test_fnr),
            format!("{:.3}", m.msr_normalized_flops),
            "-".to_string(),
        ]);
        out.push_str(&t.render());
        if !m.matched_on_test.comparable {
            out.push_str(&format!(
                "softmax FNR could not be matched within {MSR_FNR_TOLERANCE} points; the comparison is not like for like\n"
            ));
        }
    }
    out
}
