//! Procedural 10-class shape images.
//!
//! Every class is a rendered shape (disk, ring, square, ...) under random
//! position, scale, rotation, colours, contrast, clutter and pixel noise.
//! Low-contrast, noisy samples are genuinely ambiguous, which gives a trained
//! network a realistic population of natural errors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_SHAPES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    /// The ten labelled classes.
    Standard,
    /// Ten unrelated shapes, used as an out-of-distribution source.
    Novel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_samples: usize,
    /// Number of labelled classes, drawn from the first shapes of the family.
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Range of the per-sample Gaussian pixel-noise standard deviation.
    pub noise: (f64, f64),
    /// Range of the per-sample foreground contrast.
    pub contrast: (f64, f64),
    /// Maximum number of distractor blobs.
    pub clutter: usize,
    /// Maximum rotation in radians.
    pub max_rotation: f64,
    pub family: ShapeFamily,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_samples: 10_000,
            num_classes: NUM_SHAPES,
            image_size: 16,
            channels: 3,
            noise: (0.05, 0.45),
            contrast: (0.25, 1.0),
            clutter: 3,
            max_rotation: 0.45,
            family: ShapeFamily::Standard,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 {
            return Err(Error::InvalidArgument("image_size must be at least 4".into()));
        }
        if !(2..=NUM_SHAPES).contains(&self.num_classes) {
            return Err(Error::InvalidArgument(format!(
                "num_classes must lie in 2..={NUM_SHAPES}, got {}",
                self.num_classes
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidArgument("channels must be 1 or 3".into()));
        }
        if self.noise.0 < 0.0 || self.noise.0 > self.noise.1 {
            return Err(Error::InvalidArgument("noise range must satisfy 0 <= lo <= hi".into()));
        }
        if self.contrast.0 < 0.0 || self.contrast.0 > self.contrast.1 {
            return Err(Error::InvalidArgument("contrast range must satisfy 0 <= lo <= hi".into()));
        }
        Ok(())
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        vec![self.channels, self.image_size, self.image_size]
    }

    /// Balanced labels `i mod num_classes`, rendered in order.
    pub fn generate(&self) -> Result<LabeledDataset> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let n = self.sample_len();
        let mut inputs = Vec::with_capacity(self.num_samples * n);
        let mut labels = Vec::with_capacity(self.num_samples);
        for i in 0..self.num_samples {
            let class = i % self.num_classes;
            inputs.extend(self.render(class, &mut rng));
            labels.push(class);
        }
        LabeledDataset::new(self.sample_shape(), self.num_classes, inputs, labels, Split::Train)
    }

    /// Unlabelled images, e.g. the novel family as an OOD source.
    pub fn generate_images(&self) -> Result<Vec<Tensor>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.num_samples)
            .map(|i| Tensor::new(self.sample_shape(), self.render(i % NUM_SHAPES, &mut rng)))
            .collect()
    }

    fn sample_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    fn render(&self, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let size = self.image_size as f64;
        let hw = self.image_size * self.image_size;
        let jitter = 0.15 * size;
        let cx = size / 2.0 + rng.random_range(-jitter..=jitter);
        let cy = size / 2.0 + rng.random_range(-jitter..=jitter);
        let radius = size * rng.random_range(0.22..0.36);
        let theta = rng.random_range(-self.max_rotation..=self.max_rotation);
        let contrast = rng.random_range(self.contrast.0..=self.contrast.1);
        let sigma = rng.random_range(self.noise.0..=self.noise.1);

        let mut bg = [0.0f64; 3];
        let mut fg = [0.0f64; 3];
        for c in 0..3 {
            bg[c] = rng.random_range(0.0..0.5);
            fg[c] = rng.random_range(0.0..1.0);
        }
        // keep the foreground visibly apart from the background on average
        let gap: f64 = (0..3).map(|c| (fg[c] - bg[c]).abs()).sum::<f64>() / 3.0;
        if gap < 0.25 {
            for c in 0..3 {
                fg[c] = (bg[c] + 0.5).min(1.0);
            }
        }
        let grad = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));

        let mut img = vec![0.0; 3 * hw];
        for y in 0..self.image_size {
            for x in 0..self.image_size {
                let ramp = grad.0 * (x as f64 / size - 0.5) + grad.1 * (y as f64 / size - 0.5);
                let cover = coverage(x, y, |px, py| {
                    let (dx, dy) = (px - cx, py - cy);
                    let (s, c) = theta.sin_cos();
                    let u = (c * dx + s * dy) / radius;
                    let v = (-s * dx + c * dy) / radius;
                    inside(self.family, class, u, v)
                });
                for ch in 0..3 {
                    img[ch * hw + y * self.image_size + x] = bg[ch] + ramp + contrast * cover * (fg[ch] - bg[ch]);
                }
            }
        }

        let blobs = if self.clutter > 0 {
            rng.random_range(0..=self.clutter)
        } else {
            0
        };
        for _ in 0..blobs {
            let bx = rng.random_range(0.0..size);
            let by = rng.random_range(0.0..size);
            let br = rng.random_range(0.8..2.0);
            let tint: [f64; 3] = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let alpha = rng.random_range(0.2..0.6);
            for y in 0..self.image_size {
                for x in 0..self.image_size {
                    let d2 = (x as f64 + 0.5 - bx).powi(2) + (y as f64 + 0.5 - by).powi(2);
                    if d2 <= br * br {
                        for ch in 0..3 {
                            let p = &mut img[ch * hw + y * self.image_size + x];
                            *p = (1.0 - alpha) * *p + alpha * tint[ch];
                        }
                    }
                }
            }
        }

        let normal = Normal::new(0.0, sigma.max(1e-12)).expect("finite std");
        for p in img.iter_mut() {
            *p = (*p + normal.sample(rng)).clamp(0.0, 1.0);
        }

        if self.channels == 1 {
            (0..hw).map(|i| (img[i] + img[hw + i] + img[2 * hw + i]) / 3.0).collect()
        } else {
            img
        }
    }
}

/// Fraction of a 2x2 supersampling grid inside the shape.
fn coverage(x: usize, y: usize, inside: impl Fn(f64, f64) -> bool) -> f64 {
    let mut hits = 0;
    for oy in [0.25, 0.75] {
        for ox in [0.25, 0.75] {
            if inside(x as f64 + ox, y as f64 + oy) {
                hits += 1;
            }
        }
    }
    hits as f64 / 4.0
}

/// Shape membership in unit-radius local coordinates (`v` points down).
fn inside(family: ShapeFamily, class: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    let box_norm = u.abs().max(v.abs());
    match family {
        ShapeFamily::Standard => match class {
            0 => r <= 1.0,
            1 => (0.55..=1.0).contains(&r),
            2 => box_norm <= 0.8,
            3 => (0.5..=0.85).contains(&box_norm),
            4 => (u.abs() <= 0.25 && v.abs() <= 1.0) || (v.abs() <= 0.25 && u.abs() <= 1.0),
            5 => {
                let (a, b) = ((u + v) * std::f64::consts::FRAC_1_SQRT_2, (u - v) * std::f64::consts::FRAC_1_SQRT_2);
                (a.abs() <= 0.25 && b.abs() <= 1.0) || (b.abs() <= 0.25 && a.abs() <= 1.0)
            }
            6 => (-0.9..=0.7).contains(&v) && u.abs() <= 0.9 * (v + 0.9) / 1.6,
            7 => (-0.7..=0.9).contains(&v) && u.abs() <= 0.9 * (0.9 - v) / 1.6,
            8 => u.abs() <= 0.9 && ((v - 0.45).abs() <= 0.2 || (v + 0.45).abs() <= 0.2),
            _ => v.abs() <= 0.9 && ((u - 0.45).abs() <= 0.2 || (u + 0.45).abs() <= 0.2),
        },
        ShapeFamily::Novel => match class {
            0 => r <= 0.35,
            1 => ((u * 4.0).floor() + (v * 4.0).floor()).rem_euclid(2.0) == 0.0 && box_norm <= 1.0,
            2 => box_norm <= 1.0 && ((u + v) * 3.0).rem_euclid(2.0) < 1.0,
            3 => u.abs() + v.abs() <= 1.0 && u.abs() + v.abs() >= 0.6,
            4 => (r - 0.75).abs() <= 0.12 || r <= 0.2,
            5 => v.abs() <= 0.15 && u.abs() <= 1.0,
            6 => box_norm <= 1.0 && (v * 5.0).rem_euclid(2.0) < 1.0,
            7 => {
                let angle = v.atan2(u);
                r <= 0.45 + 0.45 * (5.0 * angle).cos().max(0.0)
            }
            8 => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.16 || (u + 0.5).powi(2) + (v + 0.5).powi(2) <= 0.16,
            _ => box_norm <= 1.0 && u >= v,
        },
    }
}
