//! Datasets: CIFAR-10 binary batches, a seeded synthetic task, batching and augmentation.

mod cifar;
mod synthetic;

use rand::seq::SliceRandom;
use rand::Rng as _;

pub use cifar::{load_cifar10_batch, load_cifar10_binary, CIFAR_BATCH_BYTES, CIFAR_RECORD_BYTES};
pub use synthetic::{synthetic_dataset, SyntheticConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Rng;

/// Images stored as NCHW `f64` in `[0, 1]` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub resolution: usize,
    pub num_classes: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        channels: usize,
        resolution: usize,
        num_classes: usize,
        images: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per = channels * resolution * resolution;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::Dataset(format!(
                "{} pixel values for {} images of {channels}x{resolution}x{resolution}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Self {
            channels,
            resolution,
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.resolution * self.resolution
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Gather the listed records into an NCHW tensor and label list.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.image_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        let t = Tensor::new(vec![idx.len(), self.channels, self.resolution, self.resolution], data)
            .expect("batch shape matches data");
        (t, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let (t, labels) = self.batch(idx);
        Self {
            channels: self.channels,
            resolution: self.resolution,
            num_classes: self.num_classes,
            images: t.into_data(),
            labels,
        }
    }

    /// Keep only records of the listed classes, relabelled `0..classes.len()` in the given order.
    pub fn select_classes(&self, classes: &[usize]) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Dataset("need at least two classes".into()));
        }
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        let mut out = self.subset(&idx);
        for l in &mut out.labels {
            *l = classes.iter().position(|c| c == l).expect("filtered");
        }
        out.num_classes = classes.len();
        Ok(out)
    }

    /// First `n` records (or all if fewer).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Average-pool by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.resolution % factor != 0 {
            return Err(Error::Dataset(format!(
                "cannot downsample {} by {factor}",
                self.resolution
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let r = self.resolution;
        let nr = r / factor;
        let area = (factor * factor) as f64;
        let planes = self.len() * self.channels;
        let mut out = Vec::with_capacity(planes * nr * nr);
        for p in 0..planes {
            let src = &self.images[p * r * r..(p + 1) * r * r];
            for y in 0..nr {
                for x in 0..nr {
                    let mut s = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            s += src[(y * factor + dy) * r + x * factor + dx];
                        }
                    }
                    out.push(s / area);
                }
            }
        }
        Self::new(self.channels, nr, self.num_classes, out, self.labels.clone())
    }
}

/// Index batches covering every record once, in a seeded shuffled order.
pub fn shuffled_batches(len: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Index batches in record order.
pub fn ordered_batches(len: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let idx: Vec<usize> = (0..len).collect();
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Random crop from a zero-padded image and random horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Augment {
    pub crop_pad: usize,
    pub hflip: bool,
}

impl Augment {
    pub fn apply(&self, batch: &mut Tensor, rng: &mut Rng) {
        let (n, c, h, w) = batch.dims4("augment").expect("NCHW batch");
        let p = self.crop_pad as i64;
        let mut tmp = vec![0.0; c * h * w];
        for b in 0..n {
            let (dy, dx) = if p > 0 {
                (rng.random_range(-p..=p), rng.random_range(-p..=p))
            } else {
                (0, 0)
            };
            let flip = self.hflip && rng.random_bool(0.5);
            let img = &mut batch.data_mut()[b * c * h * w..(b + 1) * c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sx = if flip { w - 1 - x } else { x } as i64 + dx;
                        let sy = y as i64 + dy;
                        tmp[(ch * h + y) * w + x] = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            img[(ch * h + sy as usize) * w + sx as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
            img.copy_from_slice(&tmp);
        }
    }
}
