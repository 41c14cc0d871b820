//! Pipeline driver: configuration, artifacts and the stage commands behind
//! the `racnet` binary.

pub mod artifacts;
pub mod commands;
pub mod config;

use anyhow::Result;

use commands::{attack, eval, load_splits, ood, relevance, sweep, train, train_racs, Context};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Train,
    Relevance,
    TrainRacs,
    Eval { baseline_only: bool },
    Sweep,
    Attack,
    Ood,
    /// Train, sweep, train the selected cells, then eval, attack and ood.
    Pipeline,
}

/// Runs one stage and returns its human-readable summary.
pub fn execute(ctx: &Context, stage: Stage) -> Result<String> {
    let splits = load_splits(&ctx.cfg)?;
    match stage {
        Stage::Train => Ok(train::summary(&train::run(ctx, &splits)?)),
        Stage::Relevance => {
            let (net, meta) = train::load_trained(ctx, &splits)?;
            let files = relevance::matrices(ctx, &net, &meta.model_hash, &splits.train, &ctx.cfg.rac.layers)?;
            Ok(relevance::summary(&files))
        }
        Stage::TrainRacs => {
            let (net, meta) = train::load_trained(ctx, &splits)?;
            let (a, log) = train_racs::run(ctx, &net, &meta.model_hash, &splits)?;
            Ok(train_racs::summary(&a, &log))
        }
        Stage::Eval { baseline_only } => {
            let (net, meta) = train::load_trained(ctx, &splits)?;
            let racs = if baseline_only {
                None
            } else {
                Some(train_racs::load(ctx, &net, &meta.model_hash, &splits)?)
            };
            let (report, _) = eval::run(ctx, &net, &meta.model_hash, &splits, racs.as_ref())?;
            Ok(eval::summary(&report))
        }
        Stage::Sweep => {
            let (net, meta) = train::load_trained(ctx, &splits)?;
            Ok(sweep::render(&sweep::run(ctx, &net, &meta.model_hash, &splits)?))
        }
        Stage::Attack => {
            let (net, meta) = train::load_trained(ctx, &splits)?;
            let racs = train_racs::load(ctx, &net, &meta.model_hash, &splits)?;
            Ok(attack::summary(&attack::run(ctx, &net, &meta.model_hash, &splits, &racs)?))
        }
        Stage::Ood => {
            let (net, meta) = train::load_trained(ctx, &splits)?;
            let racs = train_racs::load(ctx, &net, &meta.model_hash, &splits)?;
            Ok(ood::render(&ood::run(ctx, &net, &meta.model_hash, &splits, &racs)?))
        }
        Stage::Pipeline => {
            let mut out = String::new();
            let trained = train::run(ctx, &splits)?;
            out.push_str(&train::summary(&trained));
            let hash = trained.meta.model_hash.clone();
            let net = trained.net;
            out.push('\n');
            out.push_str(&sweep::render(&sweep::run(ctx, &net, &hash, &splits)?));
            let mut from_sweep = ctx.clone();
            from_sweep.cfg.rac.from_sweep = true;
            let (racs, log) = train_racs::run(&from_sweep, &net, &hash, &splits)?;
            out.push('\n');
            out.push_str(&train_racs::summary(&racs, &log));
            out.push('\n');
            out.push_str(&eval::summary(&eval::run(ctx, &net, &hash, &splits, Some(&racs))?.0));
            out.push('\n');
            out.push_str(&attack::summary(&attack::run(ctx, &net, &hash, &splits, &racs)?));
            out.push('\n');
            out.push_str(&ood::render(&ood::run(ctx, &net, &hash, &splits, &racs)?));
            Ok(out)
        }
    }
}
