//! CIFAR-10 binary batches: records of one label byte followed by
//! 32x32 red, green and blue planes.

use std::fs;
use std::path::Path;

use super::{LabeledDataset, Split};
use crate::error::{Error, Result};

pub const SIDE: usize = 32;
pub const RECORD_LEN: usize = 1 + 3 * SIDE * SIDE;
pub const CLASSES: usize = 10;

pub fn parse_batch(bytes: &[u8]) -> Result<(Vec<f64>, Vec<usize>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(RECORD_LEN) {
        return Err(Error::Dataset(format!(
            "CIFAR batch length {} is not a multiple of {RECORD_LEN}",
            bytes.len()
        )));
    }
    let mut inputs = Vec::with_capacity(bytes.len() / RECORD_LEN * (RECORD_LEN - 1));
    let mut labels = Vec::with_capacity(bytes.len() / RECORD_LEN);
    for rec in bytes.chunks(RECORD_LEN) {
        if rec[0] as usize >= CLASSES {
            return Err(Error::LabelOutOfRange {
                label: rec[0] as usize,
                classes: CLASSES,
            });
        }
        labels.push(rec[0] as usize);
        inputs.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok((inputs, labels))
}

/// Concatenates the given batch files into one dataset.
pub fn load_batches(paths: &[impl AsRef<Path>], split: Split) -> Result<LabeledDataset> {
    if paths.is_empty() {
        return Err(Error::Dataset("no CIFAR batch files given".into()));
    }
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let bytes = fs::read(p.as_ref())
            .map_err(|e| Error::Dataset(format!("{}: {e}", p.as_ref().display())))?;
        let (i, l) = parse_batch(&bytes)?;
        inputs.extend(i);
        labels.extend(l);
    }
    LabeledDataset::new(vec![3, SIDE, SIDE], CLASSES, inputs, labels, split)
}

/// Standard layout: `data_batch_{1..5}.bin` for training, `test_batch.bin` for test.
pub fn load_dir(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let train: Vec<_> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    Ok((
        load_batches(&train, Split::Train)?,
        load_batches(&[dir.join("test_batch.bin")], Split::Test)?,
    ))
}
