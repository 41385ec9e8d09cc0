//! Binary checkpoint format.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, `u64` header length,
//! JSON header (topology and parameter table), then every parameter as raw
//! `f64` values in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layer, ModelGraph};
use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CIMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    name: String,
    input_channels: usize,
    input_resolution: usize,
    num_classes: usize,
    layers: Vec<Layer>,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

pub fn write_checkpoint(model: &ModelGraph, w: &mut impl Write) -> Result<()> {
    let header = Header {
        name: model.name.clone(),
        input_channels: model.input_channels,
        input_resolution: model.input_resolution,
        num_classes: model.num_classes,
        layers: model.layers.clone(),
        params: model
            .params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for p in model.params.iter() {
        for v in p.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ModelGraph> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    from_bytes(&buf)
}

/// Take `n` bytes from the front of `buf`.
pub(crate) fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Truncated(format!(
            "{what}: need {n} bytes, {} left",
            buf.len()
        )));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

pub(crate) fn read_f64s(buf: &mut &[u8], n: usize, what: &str) -> Result<Vec<f64>> {
    let bytes = take(buf, n * 8, what)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Parse the common magic/version/header prefix shared by the binary formats.
pub(crate) fn read_prefix<'a>(
    buf: &mut &'a [u8],
    magic: &[u8; 8],
    version: u32,
    bad_magic: fn() -> Error,
) -> Result<&'a [u8]> {
    if buf.len() < 8 || &buf[..8] != magic {
        return Err(bad_magic());
    }
    *buf = &buf[8..];
    let found = u32::from_le_bytes(take(buf, 4, "version")?.try_into().expect("4 bytes"));
    if found != version {
        return Err(Error::VersionMismatch {
            found,
            expected: version,
        });
    }
    let len = u64::from_le_bytes(take(buf, 8, "header length")?.try_into().expect("8 bytes"));
    take(buf, len as usize, "header")
}

fn from_bytes(mut buf: &[u8]) -> Result<ModelGraph> {
    let json = read_prefix(&mut buf, MAGIC, CHECKPOINT_VERSION, || Error::NotACheckpoint)?;
    let header: Header = serde_json::from_slice(json)?;
    let mut params = ParamStore::new();
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        let data = read_f64s(&mut buf, n, &e.name)?;
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?, e.trainable);
    }
    if !buf.is_empty() {
        return Err(Error::InvalidModel(format!(
            "{} trailing bytes after parameter data",
            buf.len()
        )));
    }
    let m = ModelGraph {
        name: header.name,
        input_channels: header.input_channels,
        input_resolution: header.input_resolution,
        num_classes: header.num_classes,
        layers: header.layers,
        params,
    };
    m.validate()?;
    Ok(m)
}

pub fn save_checkpoint(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelGraph> {
    from_bytes(&fs::read(path)?)
}
