use std::path::PathBuf;

use anyhow::Result;
use log::info;
use racnet_core::data::LabeledDataset;
use racnet_core::lrp::{relevance_score_matrices, MatrixKey, StoredMatrix};
use racnet_core::nn::Network;

use super::Context;
use crate::artifacts::{read_json, write_json, Table};

pub struct MatrixFile {
    pub stored: StoredMatrix,
    pub path: PathBuf,
    pub cached: bool,
}

impl MatrixFile {
    pub fn digest(&self) -> String {
        self.stored.key.digest()
    }
}

/// Relevance matrices for `layers`, computed over the training split. A
/// stored matrix is reused when its key matches, unless forced.
pub fn matrices(
    ctx: &Context,
    net: &Network,
    model_hash: &str,
    train: &LabeledDataset,
    layers: &[usize],
) -> Result<Vec<MatrixFile>> {
    let tag = train.content_hash();
    let keys: Vec<MatrixKey> = layers
        .iter()
        .map(|&layer| MatrixKey {
            model_hash: model_hash.to_string(),
            layer,
            alpha: ctx.cfg.lrp.alpha,
            beta: ctx.cfg.lrp.beta,
            dataset_tag: tag.clone(),
        })
        .collect();

    let mut found: Vec<Option<StoredMatrix>> = Vec::with_capacity(keys.len());
    for key in &keys {
        let path = ctx.run.relevance(key.layer, &key.digest());
        let hit = if !ctx.force && path.is_file() {
            read_json::<StoredMatrix>(&path).ok().filter(|s| s.key == *key && s.matrix.layer == key.layer)
        } else {
            None
        };
        found.push(hit);
    }
    let missing: Vec<usize> = keys
        .iter()
        .zip(&found)
        .filter(|(_, f)| f.is_none())
        .map(|(k, _)| k.layer)
        .collect();
    let mut fresh = if missing.is_empty() {
        Vec::new()
    } else {
        info!("computing relevance at layers {missing:?} over {} samples", train.len());
        relevance_score_matrices(net, train, &missing, &ctx.cfg.lrp)?
    }
    .into_iter();

    let mut out = Vec::with_capacity(keys.len());
    for (key, hit) in keys.into_iter().zip(found) {
        let path = ctx.run.relevance(key.layer, &key.digest());
        let file = match hit {
            Some(stored) => MatrixFile {
                stored,
                path,
                cached: true,
            },
            None => {
                let stored = StoredMatrix {
                    key,
                    matrix: fresh.next().expect("one fresh matrix per missing layer"),
                };
                write_json(&path, &stored)?;
                MatrixFile {
                    stored,
                    path,
                    cached: false,
                }
            }
        };
        out.push(file);
    }
    Ok(out)
}

pub fn summary(files: &[MatrixFile]) -> String {
    let mut t = Table::new(&["layer", "classes", "maps", "digest", "status", "file"]);
    for f in files {
        let m = &f.stored.matrix;
        t.row(&[
            m.layer.to_string(),
            m.num_classes().to_string(),
            m.num_maps().to_string(),
            f.digest(),
            if f.cached { "cached" } else { "computed" }.to_string(),
            f.path.display().to_string(),
        ]);
    }
    t.render()
}
