//! Labeled image datasets, splits, and loaders.

pub mod cifar;
pub mod idx;
pub mod noise;
pub mod synthetic;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// Samples `(x_i, y_i)` stored contiguously, all with the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    sample_shape: Vec<usize>,
    num_classes: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
    split: Split,
}

impl LabeledDataset {
    pub fn new(
        sample_shape: Vec<usize>,
        num_classes: usize,
        inputs: Vec<f64>,
        labels: Vec<usize>,
        split: Split,
    ) -> Result<Self> {
        let sample_len: usize = sample_shape.iter().product();
        if sample_len == 0 {
            return Err(Error::Dataset(format!("bad sample shape {sample_shape:?}")));
        }
        if inputs.len() != sample_len * labels.len() {
            return Err(Error::Dataset(format!(
                "{} input values do not match {} samples of shape {sample_shape:?}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: num_classes,
            });
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dataset("non-finite input value".into()));
        }
        Ok(Self {
            sample_shape,
            num_classes,
            inputs,
            labels,
            split,
        })
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.inputs[i * n..(i + 1) * n]
    }

    pub fn input_tensor(&self, i: usize) -> Tensor {
        Tensor::new(self.sample_shape.clone(), self.input(i).to_vec()).expect("validated shape")
    }

    pub fn inputs(&self) -> impl Iterator<Item = Tensor> + '_ {
        (0..self.len()).map(|i| self.input_tensor(i))
    }

    /// Stacks the given samples into a `[n, ..sample_shape]` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.input(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Tensor::new(shape, data).expect("validated shape")
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut inputs = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            inputs.extend_from_slice(self.input(i));
        }
        Self {
            sample_shape: self.sample_shape.clone(),
            num_classes: self.num_classes,
            inputs,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.sample_shape != other.sample_shape || self.num_classes != other.num_classes {
            return Err(Error::Dataset("cannot concatenate datasets of different layouts".into()));
        }
        let mut out = self.clone();
        out.inputs.extend_from_slice(&other.inputs);
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// SHA-256 over shape, class count, labels and input bits.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for &d in &self.sample_shape {
            h.update((d as u64).to_le_bytes());
        }
        h.update((self.num_classes as u64).to_le_bytes());
        for &y in &self.labels {
            h.update((y as u64).to_le_bytes());
        }
        for v in &self.inputs {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Shuffles with `seed` and cuts into train/validation/test by fractions
    /// (the test fraction is whatever remains).
    pub fn split_three(&self, train_frac: f64, val_frac: f64, seed: u64) -> Result<(Self, Self, Self)> {
        if !(0.0..=1.0).contains(&train_frac) || !(0.0..=1.0).contains(&val_frac) || train_frac + val_frac > 1.0 {
            return Err(Error::InvalidArgument(format!(
                "split fractions {train_frac} + {val_frac} must lie in [0, 1]"
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (self.len() as f64 * train_frac).round() as usize;
        let n_val = ((self.len() as f64 * val_frac).round() as usize).min(self.len() - n_train);
        let train = self.subset(&order[..n_train]).with_split(Split::Train);
        let val = self.subset(&order[n_train..n_train + n_val]).with_split(Split::Validation);
        let test = self.subset(&order[n_train + n_val..]).with_split(Split::Test);
        Ok((train, val, test))
    }
}
