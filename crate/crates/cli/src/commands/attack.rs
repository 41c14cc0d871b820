use anyhow::Result;
use log::info;
use racnet_core::eval::{generate_adversarial, AdversarialExample, AdversarialReport, AttackConfig, AttackMode};
use racnet_core::nn::Network;
use serde::{Deserialize, Serialize};

use super::train_racs::RacArtifact;
use super::{write_summary, Context, Splits};
use crate::artifacts::{opt_pct, pct, write_json, write_jsonl, Provenance, Table};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialRow {
    pub mode: AttackMode,
    pub index: usize,
    pub true_label: usize,
    pub target: usize,
    pub l2: f64,
    pub cells_fooled: bool,
}

/// Mean distortion of the two adversaries on the same samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L2Comparison {
    pub zero_knowledge_mean_l2: Option<f64>,
    pub full_knowledge_mean_l2: Option<f64>,
    pub zero_knowledge_success_rate: f64,
    pub full_knowledge_success_rate: f64,
    /// Full-knowledge adversaries needed at least as much distortion.
    pub full_at_least_zero: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub provenance: Provenance,
    pub config: AttackConfig,
    pub zero_knowledge: AdversarialReport,
    pub full_knowledge: Option<AdversarialReport>,
    pub l2_comparison: Option<L2Comparison>,
}

fn rows(examples: &[AdversarialExample], mode: AttackMode) -> impl Iterator<Item = AdversarialRow> + '_ {
    examples.iter().map(move |e| AdversarialRow {
        mode,
        index: e.index,
        true_label: e.true_label,
        target: e.target,
        l2: e.l2,
        cells_fooled: e.cells_fooled,
    })
}

pub fn run(ctx: &Context, net: &Network, model_hash: &str, splits: &Splits, racs: &RacArtifact) -> Result<AttackReport> {
    let zk = AttackConfig {
        mode: AttackMode::ZeroKnowledge,
        seed: ctx.cfg.seed,
        ..ctx.cfg.attack.config.clone()
    };
    let system = Some((racs.bundle.racs.as_slice(), &racs.policy));
    info!("zero-knowledge attack on up to {:?} test samples", zk.max_samples);
    let (zero_examples, zero) = generate_adversarial(net, system, &splits.test, &zk)?;
    let mut all_rows: Vec<AdversarialRow> = rows(&zero_examples, AttackMode::ZeroKnowledge).collect();

    let (full, l2_comparison) = if ctx.cfg.attack.paired {
        let fk = AttackConfig {
            mode: AttackMode::FullKnowledge,
            ..zk.clone()
        };
        info!("full-knowledge attack on the same samples");
        let (full_examples, full) = generate_adversarial(net, system, &splits.test, &fk)?;
        all_rows.extend(rows(&full_examples, AttackMode::FullKnowledge));
        let cmp = L2Comparison {
            zero_knowledge_mean_l2: zero.mean_l2,
            full_knowledge_mean_l2: full.mean_l2,
            zero_knowledge_success_rate: zero.success_rate,
            full_knowledge_success_rate: full.success_rate,
            full_at_least_zero: zero.mean_l2.zip(full.mean_l2).map(|(z, f)| f >= z),
        };
        (Some(full), Some(cmp))
    } else {
        (None, None)
    };

    let report = AttackReport {
        provenance: Provenance {
            config_hash: ctx.cfg.hash(),
            training_key: ctx.cfg.training_key(),
            dataset_hash: splits.hash(),
            model_hash: Some(model_hash.to_string()),
            racs_hash: Some(racs.hash()),
        },
        config: zk,
        zero_knowledge: zero,
        full_knowledge: full,
        l2_comparison,
    };
    let dir = ctx.run.stage("attack");
    write_jsonl(&dir.join("adversarial.jsonl"), &all_rows)?;
    write_json(&dir.join("report.json"), &report)?;
    write_summary(&dir.join("summary.txt"), &summary(&report))?;
    Ok(report)
}

fn l2(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

pub fn summary(r: &AttackReport) -> String {
    let mut t = Table::new(&["adversary", "attempted", "success %", "mean L2", "cells fooled", "adv. TNR %"]);
    for a in std::iter::once(&r.zero_knowledge).chain(&r.full_knowledge) {
        t.row(&[
            a.mode.as_str().to_string(),
            a.attempted.to_string(),
            pct(a.success_rate),
            l2(a.mean_l2),
            a.cells_fooled.to_string(),
            opt_pct(a.adv_tnr),
        ]);
    }
    let mut out = t.render();
    if let Some(c) = &r.l2_comparison {
        out.push_str(&format!(
            "mean L2: full knowledge {} vs zero knowledge {} (success {:.2} % vs {:.2} %); full >= zero: {}\n",
            l2(c.full_knowledge_mean_l2),
            l2(c.zero_knowledge_mean_l2),
            c.full_knowledge_success_rate,
            c.zero_knowledge_success_rate,
            c.full_at_least_zero.map_or_else(|| "n/a".to_string(), |b| b.to_string())
        ));
    }
    out
}
