use anyhow::{bail, Context as _, Result};
use log::info;
use racnet_core::nn::io::{model_from_bytes, model_to_bytes};
use racnet_core::nn::{evaluate, model_hash, train, Network, TrainConfig};

use super::{Context, Splits};
use crate::artifacts::{ensure_hash, read_json, write_atomic, write_json, write_jsonl, ModelMeta, Table};

pub struct Trained {
    pub net: Network,
    pub meta: ModelMeta,
    pub cached: bool,
}

/// Trains the backbone, or reuses the stored one when it was trained under
/// the same dataset, architecture, training settings and seed.
pub fn run(ctx: &Context, splits: &Splits) -> Result<Trained> {
    let cfg = &ctx.cfg;
    if !ctx.force && ctx.run.model().is_file() && ctx.run.model_meta().is_file() {
        let meta: ModelMeta = read_json(&ctx.run.model_meta())?;
        if meta.training_key == cfg.training_key() && meta.dataset_hash == splits.hash() {
            let net = load(ctx, &meta)?;
            info!("reusing trained model {}", &meta.model_hash[..12]);
            return Ok(Trained { net, meta, cached: true });
        }
    }

    let spec = cfg
        .arch
        .resolve(splits.train.sample_shape(), splits.train.num_classes())
        .context("arch")?;
    let net = spec.build(cfg.seed).context("arch")?;
    let tc = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    info!(
        "training {} parameters on {} samples for {} epochs",
        net.num_params(),
        splits.train.len(),
        tc.epochs
    );
    let (net, report) = train(net, &splits.train, &tc)?;
    let (_, train_acc) = evaluate(&net, &splits.train)?;
    let (_, val_acc) = evaluate(&net, &splits.validation)?;
    let (_, test_acc) = evaluate(&net, &splits.test)?;
    let meta = ModelMeta {
        model_hash: model_hash(&net)?,
        training_key: cfg.training_key(),
        dataset_hash: splits.hash(),
        seed: cfg.seed,
        num_params: net.num_params(),
        train_accuracy: 100.0 * train_acc,
        validation_accuracy: 100.0 * val_acc,
        test_accuracy: 100.0 * test_acc,
    };
    write_atomic(&ctx.run.model(), &model_to_bytes(&net)?)?;
    write_jsonl(&ctx.run.train_log(), &report.epochs)?;
    write_json(&ctx.run.model_meta(), &meta)?;
    Ok(Trained {
        net,
        meta,
        cached: false,
    })
}

fn load(ctx: &Context, meta: &ModelMeta) -> Result<Network> {
    let bytes = std::fs::read(ctx.run.model()).with_context(|| format!("reading {}", ctx.run.model().display()))?;
    let net = model_from_bytes(&bytes)?;
    ensure_hash("model", &meta.model_hash, &model_hash(&net)?)?;
    Ok(net)
}

/// Loads the stored model for downstream stages and checks that it belongs
/// to the current configuration and data.
pub fn load_trained(ctx: &Context, splits: &Splits) -> Result<(Network, ModelMeta)> {
    if !ctx.run.model().is_file() || !ctx.run.model_meta().is_file() {
        bail!("no trained model in {}; run `train` first", ctx.run.root.display());
    }
    let meta: ModelMeta = read_json(&ctx.run.model_meta())?;
    if meta.training_key != ctx.cfg.training_key() {
        bail!("the stored model was trained under a different configuration; rerun `train`");
    }
    ensure_hash("dataset", &meta.dataset_hash, &splits.hash())?;
    Ok((load(ctx, &meta)?, meta))
}

pub fn summary(t: &Trained) -> String {
    let m = &t.meta;
    let mut table = Table::new(&["split", "accuracy %"]);
    table
        .row(&["train".to_string(), format!("{:.2}", m.train_accuracy)])
        .row(&["validation".to_string(), format!("{:.2}", m.validation_accuracy)])
        .row(&["test".to_string(), format!("{:.2}", m.test_accuracy)]);
    format!(
        "model {} ({} parameters{})\n{}",
        &m.model_hash[..12],
        m.num_params,
        if t.cached { ", cached" } else { "" },
        table.render()
    )
}
