//! Seeded toy image task: each class has a prototype built from Gaussian
//! blobs; samples are shifted, contrast-jittered, noisy copies.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::{rng, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub resolution: usize,
    pub channels: usize,
    pub blobs: usize,
    /// Per-pixel Gaussian noise standard deviation.
    pub noise: f64,
    /// Maximum cyclic shift in pixels along each axis.
    pub max_shift: usize,
    /// Relative per-sample contrast jitter.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            per_class: 500,
            test_per_class: 250,
            resolution: 16,
            channels: 3,
            blobs: 3,
            noise: 0.8,
            max_shift: 2,
            jitter: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn prototypes(&self) -> Result<Vec<Vec<f64>>> {
        self.check()?;
        Ok(self.prototypes_with(&mut rng(self.seed)))
    }

    fn check(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Dataset(format!("need at least two classes, got {}", self.classes)));
        }
        if self.resolution == 0 || self.channels == 0 {
            return Err(Error::Dataset("empty image geometry".into()));
        }
        Ok(())
    }

    fn prototypes_with(&self, rng: &mut Rng) -> Vec<Vec<f64>> {
        let (r, c) = (self.resolution, self.channels);
        let rf = r as f64;
        (0..self.classes)
            .map(|_| {
                let mut img = vec![0.5; c * r * r];
                for _ in 0..self.blobs.max(1) {
                    let cy = rng.random_range(0.15..0.85) * rf;
                    let cx = rng.random_range(0.15..0.85) * rf;
                    let sigma = rng.random_range(0.08..0.2) * rf;
                    let amps: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
                    for (ch, amp) in amps.iter().enumerate() {
                        for y in 0..r {
                            for x in 0..r {
                                let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                                img[(ch * r + y) * r + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                            }
                        }
                    }
                }
                img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
                img
            })
            .collect()
    }

    fn sample(&self, proto: &[f64], rng: &mut Rng) -> Vec<f64> {
        let r = self.resolution;
        let s = self.max_shift as i64;
        let (dy, dx) = if s > 0 {
            (rng.random_range(-s..=s), rng.random_range(-s..=s))
        } else {
            (0, 0)
        };
        let gain = if self.jitter > 0.0 {
            1.0 + rng.random_range(-self.jitter..self.jitter)
        } else {
            1.0
        };
        let ri = r as i64;
        let mut out = Vec::with_capacity(proto.len());
        for ch in 0..self.channels {
            for y in 0..ri {
                for x in 0..ri {
                    let sy = (y - dy).rem_euclid(ri) as usize;
                    let sx = (x - dx).rem_euclid(ri) as usize;
                    let base = 0.5 + (proto[(ch * r + sy) * r + sx] - 0.5) * gain;
                    let n = if self.noise > 0.0 {
                        let z: f64 = StandardNormal.sample(rng);
                        self.noise * z
                    } else {
                        0.0
                    };
                    out.push((base + n).clamp(0.0, 1.0));
                }
            }
        }
        out
    }

    fn draw(&self, per_class: usize, proto: &[Vec<f64>], rng: &mut Rng) -> Result<Dataset> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        // class-interleaved order so any prefix is balanced
        for _ in 0..per_class {
            for (k, p) in proto.iter().enumerate() {
                images.extend(self.sample(p, rng));
                labels.push(k);
            }
        }
        Dataset::new(self.channels, self.resolution, self.classes, images, labels)
    }

    /// Training and test sets sharing the same prototypes.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        self.check()?;
        let mut rng = rng(self.seed);
        let proto = self.prototypes_with(&mut rng);
        let train = self.draw(self.per_class, &proto, &mut rng)?;
        let test = self.draw(self.test_per_class, &proto, &mut rng)?;
        Ok((train, test))
    }
}

/// Training split of the default task with the given size and seed.
pub fn synthetic_dataset(classes: usize, per_class: usize, resolution: usize, seed: u64) -> Result<Dataset> {
    let cfg = SyntheticConfig {
        classes,
        per_class,
        test_per_class: 0,
        resolution,
        seed,
        ..SyntheticConfig::default()
    };
    Ok(cfg.generate()?.0)
}
