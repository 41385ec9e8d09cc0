//! CIFAR-10 binary batches: each record is one label byte followed by
//! 3072 pixel bytes (1024 red, 1024 green, 1024 blue, row-major 32×32).

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

pub const CIFAR_RECORD_BYTES: usize = 1 + 3072;
pub const CIFAR_BATCH_BYTES: usize = 10_000 * CIFAR_RECORD_BYTES;

pub fn parse_records(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Dataset(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut images = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        labels.push(rec[0] as usize);
        images.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(3, 32, 10, images, labels)
}

/// One full batch file (10000 records).
pub fn load_cifar10_batch(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    if bytes.len() != CIFAR_BATCH_BYTES {
        return Err(Error::Dataset(format!(
            "{}: {} bytes, expected {CIFAR_BATCH_BYTES} bytes per batch file",
            path.display(),
            bytes.len()
        )));
    }
    parse_records(&bytes)
}

/// `data_batch_1..5.bin` as the training set and `test_batch.bin` as the test set.
pub fn load_cifar10_binary(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let mut train: Option<Dataset> = None;
    for i in 1..=5 {
        let d = load_cifar10_batch(dir.join(format!("data_batch_{i}.bin")))?;
        match train.as_mut() {
            None => train = Some(d),
            Some(t) => {
                t.images.extend(d.images);
                t.labels.extend(d.labels);
            }
        }
    }
    let test = load_cifar10_batch(dir.join("test_batch.bin"))?;
    Ok((train.expect("five batches loaded"), test))
}
