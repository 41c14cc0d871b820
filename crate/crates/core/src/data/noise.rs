//! Noise images used as out-of-distribution sources.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    /// i.i.d. `U(0, 1)` pixels.
    Uniform,
    /// i.i.d. `N(mean, std^2)` pixels clipped to `[0, 1]`.
    Gaussian { mean: f64, std: f64 },
}

pub fn noise_images(kind: NoiseKind, shape: &[usize], count: usize, seed: u64) -> Result<Vec<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: usize = shape.iter().product();
    let gauss = match kind {
        NoiseKind::Gaussian { mean, std } => {
            if !(std >= 0.0) || !mean.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "gaussian noise needs finite mean and std >= 0, got mean {mean}, std {std}"
                )));
            }
            Some(Normal::new(mean, std).map_err(|e| Error::InvalidArgument(format!("gaussian noise: {e}")))?)
        }
        NoiseKind::Uniform => None,
    };
    (0..count)
        .map(|_| {
            let data = (0..len)
                .map(|_| match &gauss {
                    Some(g) => g.sample(&mut rng).clamp(0.0, 1.0),
                    None => rng.random_range(0.0..1.0),
                })
                .collect();
            Tensor::new(shape.to_vec(), data)
        })
        .collect()
}
