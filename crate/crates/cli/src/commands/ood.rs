use anyhow::{Context as _, Result};
use log::info;
use racnet_core::data::noise::{noise_images, NoiseKind};
use racnet_core::data::synthetic::{ShapeFamily, SyntheticSpec};
use racnet_core::eval::{detection_metrics, ood_report, OodReport};
use racnet_core::nn::Network;
use racnet_core::Tensor;
use serde::{Deserialize, Serialize};

use super::eval::system_outcomes;
use super::train_racs::RacArtifact;
use super::{logits_of, predictions, write_summary, Context, Splits};
use crate::artifacts::{opt_pct, pct, write_json, write_jsonl, Provenance, Table};
use crate::config::OodSource;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodSummary {
    pub provenance: Provenance,
    pub sources: Vec<OodReport>,
    /// In-distribution test split for reference: natural-error TNR and
    /// overall no-decision rate.
    pub test_tnr: Option<f64>,
    pub test_fnr: Option<f64>,
    pub test_nd_pct: f64,
}

/// `count` inputs of `shape` drawn from `source`.
pub fn source_images(source: &OodSource, shape: &[usize], count: usize, seed: u64) -> Result<Vec<Tensor>> {
    Ok(match *source {
        OodSource::Uniform => noise_images(NoiseKind::Uniform, shape, count, seed)?,
        OodSource::Gaussian { mean, std } => noise_images(NoiseKind::Gaussian { mean, std }, shape, count, seed)?,
        OodSource::NovelShapes => {
            let [c, h, w] = shape else {
                anyhow::bail!("novel shapes need [C, H, W] inputs, got {shape:?}");
            };
            if h != w {
                anyhow::bail!("novel shapes need square inputs, got {h}x{w}");
            }
            SyntheticSpec {
                num_samples: count,
                image_size: *h,
                channels: *c,
                family: ShapeFamily::Novel,
                seed,
                ..SyntheticSpec::default()
            }
            .generate_images()?
        }
    })
}

pub fn run(ctx: &Context, net: &Network, model_hash: &str, splits: &Splits, racs: &RacArtifact) -> Result<OodSummary> {
    let shape = net.input_shape().to_vec();
    let (rs, policy) = (&racs.bundle.racs, &racs.policy);
    let mut reports = Vec::new();
    for (i, source) in ctx.cfg.ood.sources.iter().enumerate() {
        let name = source.name();
        info!("scoring {} samples of {name}", ctx.cfg.ood.samples);
        let seed = ctx.cfg.seed ^ (0x5EED_0000 + i as u64);
        let images = source_images(source, &shape, ctx.cfg.ood.samples, seed).with_context(|| format!("ood.sources[{i}]"))?;
        let data = racnet_core::data::LabeledDataset::new(
            shape.clone(),
            net.num_classes(),
            images.iter().flat_map(|t| t.data().iter().copied()).collect(),
            vec![0; images.len()],
            racnet_core::data::Split::Test,
        )?;
        let outcomes = system_outcomes(net, rs, policy, &data)?;
        reports.push(ood_report(&name, &outcomes)?);
    }

    let test = &splits.test;
    let baseline = predictions(&logits_of(net, test)?);
    let outcomes = system_outcomes(net, rs, policy, test)?;
    let d = detection_metrics(&baseline, test.labels(), &outcomes)?;
    let summary = OodSummary {
        provenance: Provenance {
            config_hash: ctx.cfg.hash(),
            training_key: ctx.cfg.training_key(),
            dataset_hash: splits.hash(),
            model_hash: Some(model_hash.to_string()),
            racs_hash: Some(racs.hash()),
        },
        sources: reports,
        test_tnr: d.tnr,
        test_fnr: d.fnr,
        test_nd_pct: d.pct_nd,
    };
    let dir = ctx.run.stage("ood");
    write_jsonl(&dir.join("sources.jsonl"), &summary.sources)?;
    write_json(&dir.join("report.json"), &summary)?;
    write_summary(&dir.join("summary.txt"), &render(&summary))?;
    Ok(summary)
}

pub fn render(s: &OodSummary) -> String {
    let mut t = Table::new(&["source", "samples", "ND", "TNR %", "early exit %"]);
    for r in &s.sources {
        t.row(&[
            r.source.clone(),
            r.total.to_string(),
            r.no_decision.to_string(),
            pct(r.tnr),
            pct(r.early_exit_pct),
        ]);
    }
    format!(
        "{}in-distribution test split: ND {} %, natural-error TNR {} %, FNR {} %\n",
        t.render(),
        pct(s.test_nd_pct),
        opt_pct(s.test_tnr),
        opt_pct(s.test_fnr)
    )
}
