//! Pipeline stages. Each stage reads its inputs from the run directory,
//! checks their provenance and writes its own artifacts atomically.

pub mod attack;
pub mod eval;
pub mod ood;
pub mod relevance;
pub mod sweep;
pub mod train;
pub mod train_racs;

use std::path::Path;

use anyhow::{bail, Context as _, Result};
use racnet_core::data::{cifar, idx, LabeledDataset, Split};
use racnet_core::nn::Network;
use racnet_core::tensor::argmax;

use crate::artifacts::RunDir;
use crate::config::{DatasetFormat, ExperimentConfig};

/// A validated configuration bound to its run directory.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: ExperimentConfig,
    pub run: RunDir,
    /// Recompute cached stages.
    pub force: bool,
}

impl Context {
    pub fn new(cfg: ExperimentConfig, force: bool) -> Result<Self> {
        cfg.validate()?;
        let run = RunDir::new(cfg.out_dir.clone());
        Ok(Self { cfg, run, force })
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
}

impl Splits {
    pub fn hash(&self) -> String {
        ExperimentConfig::digest_of(&[
            self.train.content_hash(),
            self.validation.content_hash(),
            self.test.content_hash(),
        ])
    }
}

/// Loads the configured dataset and cuts the train/validation/test splits.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let d = &cfg.dataset;
    let (train, validation, test) = match d.format {
        DatasetFormat::Synthetic => {
            let all = d.synthetic.generate().context("dataset.synthetic")?;
            all.split_three(d.train_frac, d.val_frac, cfg.seed)?
        }
        DatasetFormat::Cifar10 => {
            let dir = d.path.as_deref().context("dataset.path: required")?;
            let (train_all, test) = cifar::load_dir(dir).with_context(|| format!("dataset.path: {}", dir.display()))?;
            carve_validation(&train_all, test, d.val_frac, cfg.seed)?
        }
        DatasetFormat::Idx => {
            let dir = d.path.as_deref().context("dataset.path: required")?;
            let file = |name: &str| -> Result<std::path::PathBuf> {
                let p = dir.join(name);
                if !p.is_file() {
                    bail!("dataset.path: {} is missing {name}", dir.display());
                }
                Ok(p)
            };
            let train_all = idx::load_idx_pair(
                &file("train-images-idx3-ubyte")?,
                &file("train-labels-idx1-ubyte")?,
                d.num_classes,
                Split::Train,
            )?;
            let test = idx::load_idx_pair(
                &file("t10k-images-idx3-ubyte")?,
                &file("t10k-labels-idx1-ubyte")?,
                d.num_classes,
                Split::Test,
            )?;
            carve_validation(&train_all, test, d.val_frac, cfg.seed)?
        }
    };
    for (name, set) in [("train", &train), ("validation", &validation), ("test", &test)] {
        if set.is_empty() {
            bail!("dataset: the {name} split is empty");
        }
    }
    Ok(Splits {
        train,
        validation,
        test,
    })
}

fn carve_validation(
    train_all: &LabeledDataset,
    test: LabeledDataset,
    val_frac: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let (train, validation, _) = train_all.split_three(1.0 - val_frac, val_frac, seed)?;
    Ok((train, validation, test.with_split(Split::Test)))
}

/// Baseline logits of every sample, in order.
pub fn logits_of(net: &Network, data: &LabeledDataset) -> Result<Vec<Vec<f64>>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(128) {
        let logits = net.forward_batch(&data.batch(chunk))?;
        out.extend(logits.data().chunks(net.num_classes()).map(<[f64]>::to_vec));
    }
    Ok(out)
}

pub fn predictions(logits: &[Vec<f64>]) -> Vec<usize> {
    logits.iter().map(|l| argmax(l)).collect()
}

pub fn write_summary(path: &Path, text: &str) -> Result<()> {
    crate::artifacts::write_atomic(path, text.as_bytes())
}
