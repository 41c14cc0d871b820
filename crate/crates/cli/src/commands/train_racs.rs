use anyhow::{bail, Result};
use log::info;
use racnet_core::inference::InferencePolicy;
use racnet_core::nn::Network;
use racnet_core::rac::{collect_taps, train_rac_from_taps, BlcConfig, BlcReport, RacBundle};
use serde::{Deserialize, Serialize};

use super::sweep::{Selection, SELECTION_FILE};
use super::{relevance, Context, Splits};
use crate::artifacts::{ensure_hash, read_json, write_json, write_jsonl, Table};
use crate::config::ExperimentConfig;

/// The trained cells with the policy they were built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RacArtifact {
    pub policy: InferencePolicy,
    pub k: usize,
    pub blc: BlcConfig,
    pub dataset_hash: String,
    pub bundle: RacBundle,
}

impl RacArtifact {
    pub fn hash(&self) -> String {
        ExperimentConfig::digest_of(&self.bundle)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlcLogRow {
    pub layer: usize,
    #[serde(flatten)]
    pub report: BlcReport,
}

/// Layers, k and threshold from the configuration, or from the sweep
/// selection when `rac.from_sweep` is set.
pub fn resolve_policy(ctx: &Context) -> Result<(InferencePolicy, usize)> {
    let r = &ctx.cfg.rac;
    if r.from_sweep {
        let path = ctx.run.stage("sweep").join(SELECTION_FILE);
        if !path.is_file() {
            bail!("rac.from_sweep is set but {} does not exist; run `sweep` first", path.display());
        }
        let sel: Selection = read_json(&path)?;
        Ok((InferencePolicy::new(sel.layers.clone(), sel.delta_th)?, sel.k))
    } else {
        Ok((InferencePolicy::new(r.layers.clone(), r.delta_th)?, r.k))
    }
}

pub fn run(ctx: &Context, net: &Network, model_hash: &str, splits: &Splits) -> Result<(RacArtifact, Vec<BlcLogRow>)> {
    let (policy, k) = resolve_policy(ctx)?;
    policy.validate(Some(net.depth()))?;
    let files = relevance::matrices(ctx, net, model_hash, &splits.train, &policy.layers)?;
    let (taps, _) = collect_taps(net, &splits.train, &policy.layers)?;
    let blc = ctx.cfg.rac.blc.clone();
    let mut racs = Vec::new();
    let mut log = Vec::new();
    for (file, tapset) in files.iter().zip(&taps) {
        info!("training {} classifiers at layer {}", net.num_classes(), tapset.layer);
        let (rac, reports) = train_rac_from_taps(tapset, splits.train.labels(), &file.stored.matrix, k, &blc)?;
        log.extend(reports.into_iter().map(|report| BlcLogRow {
            layer: rac.layer,
            report,
        }));
        racs.push(rac);
    }
    let artifact = RacArtifact {
        policy,
        k,
        blc,
        dataset_hash: splits.hash(),
        bundle: RacBundle {
            model_hash: model_hash.to_string(),
            matrix_hashes: files.iter().map(relevance::MatrixFile::digest).collect(),
            racs,
        },
    };
    write_json(&ctx.run.racs(), &artifact)?;
    write_jsonl(&ctx.run.blc_log(), &log)?;
    Ok((artifact, log))
}

/// Loads the stored cells and checks them against the model and data.
pub fn load(ctx: &Context, net: &Network, model_hash: &str, splits: &Splits) -> Result<RacArtifact> {
    if !ctx.run.racs().is_file() {
        bail!("no auxiliary cells in {}; run `train-racs` first", ctx.run.root.display());
    }
    let a: RacArtifact = read_json(&ctx.run.racs())?;
    a.bundle.validate()?;
    ensure_hash("model", &a.bundle.model_hash, model_hash)?;
    ensure_hash("dataset", &a.dataset_hash, &splits.hash())?;
    if a.bundle.layers() != a.policy.layers {
        bail!(
            "racs.json holds cells at layers {:?} but its policy lists {:?}",
            a.bundle.layers(),
            a.policy.layers
        );
    }
    racnet_core::inference::check_racs(net, &a.bundle.racs, &a.policy)?;
    Ok(a)
}

pub fn summary(a: &RacArtifact, log: &[BlcLogRow]) -> String {
    let mut t = Table::new(&["layer", "tap", "k", "classifiers", "params", "min acc %", "mean acc %"]);
    for rac in &a.bundle.racs {
        let accs: Vec<f64> = log
            .iter()
            .filter(|r| r.layer == rac.layer)
            .map(|r| 100.0 * r.report.train_accuracy)
            .collect();
        let min = accs.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
        t.row(&[
            rac.layer.to_string(),
            format!("{:?}", rac.tap_shape),
            a.k.to_string(),
            rac.blcs.len().to_string(),
            rac.param_count().to_string(),
            format!("{min:.2}"),
            format!("{mean:.2}"),
        ]);
    }
    format!(
        "{}added parameters: {} (layers {:?}, k = {}, delta_th = {})\n",
        t.render(),
        a.bundle.param_count(),
        a.policy.layers,
        a.k,
        a.policy.delta_th
    )
}
