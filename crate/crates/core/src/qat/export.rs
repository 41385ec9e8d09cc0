//! Integer model export and its binary file format.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, `u64` header length,
//! JSON header, then per layer in order: conv weights packed two's-complement
//! (two per byte, low nibble first, when `weight_bits <= 4`; one byte each
//! otherwise) followed by the conv bias as `f64`; batchnorm gamma, beta,
//! mean, var as `f64`; linear weight and bias as `f64`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::quant::{quantize_value, round_half_away};
use crate::config::{channels_per_bitline, MacroConfig};
use crate::error::{Error, Result};
use crate::mapper::MappingPlan;
use crate::model::checkpoint::{read_f64s, read_prefix, take};
use crate::model::{beta_name, fold_bn, gamma_name, mean_name, var_name, LayerKind, ModelGraph, Source};

const MAGIC: &[u8; 8] = b"CIMINT\0\0";
pub const INTEGER_MODEL_VERSION: u32 = 1;

/// A conv as programmed into the macro: integer weights per bitline column
/// and the digital scaling after the adder tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntConv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub pad: usize,
    /// Step of the DAC quantizer feeding this layer.
    pub act_step: f64,
    pub weight_step: f64,
    pub adc_step: f64,
    /// ADC divisor in the integer domain, `adc_step / act_step`.
    pub divisor: f64,
    /// `weight_step * adc_step`.
    pub exact_scale: f64,
    /// Scale applied to accumulated codes (a power of two when exported with shifts).
    pub scale: f64,
    pub shift: Option<i32>,
    /// `|scale - exact_scale| / exact_scale`.
    pub scale_error: f64,
    pub segment_channels: Vec<usize>,
    /// Global bitline index of this layer's first column.
    pub first_column: usize,
    /// Column `s * out_channels + o` holds filter `o` restricted to segment
    /// `s`, rows ordered (channel, ky, kx).
    #[serde(skip)]
    pub columns: Vec<Vec<i32>>,
    /// Folded bias, added after scaling.
    #[serde(skip)]
    pub bias: Vec<f64>,
}

impl IntConv {
    pub fn segments(&self) -> usize {
        self.segment_channels.len()
    }

    pub fn segment_start(&self, s: usize) -> usize {
        self.segment_channels[..s].iter().sum()
    }

    fn rows(&self, col: usize) -> usize {
        self.segment_channels[col / self.out_channels] * self.kernel_size * self.kernel_size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum IntOp {
    Conv(IntConv),
    BatchNorm {
        channels: usize,
        #[serde(skip)]
        gamma: Vec<f64>,
        #[serde(skip)]
        beta: Vec<f64>,
        #[serde(skip)]
        mean: Vec<f64>,
        #[serde(skip)]
        var: Vec<f64>,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
        #[serde(skip)]
        weight: Vec<f64>,
        #[serde(skip)]
        bias: Vec<f64>,
    },
    ResidualAdd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntLayer {
    pub name: String,
    /// Producing layers; empty means the previous layer (or the image for the first).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<usize>,
    #[serde(flatten)]
    pub op: IntOp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegerModel {
    pub name: String,
    pub input_channels: usize,
    pub input_resolution: usize,
    pub num_classes: usize,
    pub macro_cfg: MacroConfig,
    pub power_of_two: bool,
    pub layers: Vec<IntLayer>,
}

impl IntegerModel {
    pub fn sources(&self, idx: usize) -> Vec<Source> {
        let l = &self.layers[idx];
        if l.inputs.is_empty() {
            vec![if idx == 0 { Source::Input } else { Source::Layer(idx - 1) }]
        } else {
            l.inputs.iter().map(|&j| Source::Layer(j)).collect()
        }
    }

    pub fn convs(&self) -> impl Iterator<Item = (usize, &IntLayer, &IntConv)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match &l.op {
            IntOp::Conv(c) => Some((i, l, c)),
            _ => None,
        })
    }

    /// Per conv layer, the relative error of the applied scale.
    pub fn scale_errors(&self) -> Vec<(String, f64)> {
        self.convs().map(|(_, l, c)| (l.name.clone(), c.scale_error)).collect()
    }
}

fn step(model: &ModelGraph, name: &Option<String>, layer: &str, what: &str) -> Result<f64> {
    let n = name
        .as_ref()
        .ok_or_else(|| Error::InvalidModel(format!("conv `{layer}` has no {what} step")))?;
    model.params.scalar(n)
}

/// Fold batchnorms, quantize conv weights with their learned steps and lay
/// them out in bitline columns, and fix the per-layer digital scales.
pub fn export_integer_model(model: &ModelGraph, cfg: &MacroConfig, power_of_two: bool) -> Result<IntegerModel> {
    if cfg.weight_bits() > 8 {
        return Err(Error::InvalidArgument(format!(
            "integer export supports at most 8-bit weights, macro has {}",
            cfg.weight_bits()
        )));
    }
    let folded = fold_bn(model)?;
    let plan = MappingPlan::build(&folded, cfg)?;
    let wb = cfg.weight_bounds();
    let mut layers = Vec::with_capacity(folded.layers.len());
    for (i, layer) in folded.layers.iter().enumerate() {
        let op = match &layer.kind {
            LayerKind::Conv(spec) => {
                let s_a = step(&folded, &layer.quant.act, &layer.name, "activation")?;
                let s_w = step(&folded, &layer.quant.weight, &layer.name, "weight")?;
                let s_adc = step(&folded, &layer.quant.psum, &layer.name, "ADC")?;
                let exact = s_w * s_adc;
                let log2 = exact.log2();
                if log2.abs() > 31.0 {
                    return Err(Error::ScaleOutOfRange {
                        layer: layer.name.clone(),
                        log2,
                    });
                }
                let (scale, shift) = if power_of_two {
                    let k = round_half_away(log2) as i32;
                    (2f64.powi(k), Some(k))
                } else {
                    (exact, None)
                };
                let cpb = channels_per_bitline(cfg, spec.kernel_size)?;
                let ranges = crate::mapper::segment_ranges(spec.in_channels, cpb);
                let w = folded.params.tensor(&layer.weight_name())?;
                let k2 = spec.kernel_size * spec.kernel_size;
                let per = spec.in_channels * k2;
                let mut columns = Vec::with_capacity(ranges.len() * spec.out_channels);
                for r in &ranges {
                    for o in 0..spec.out_channels {
                        let src = &w.data()[o * per + r.start * k2..o * per + r.end * k2];
                        columns.push(src.iter().map(|&v| quantize_value(v, s_w, wb) as i32).collect());
                    }
                }
                let bias = match folded.params.tensor(&layer.bias_name()) {
                    Ok(t) => t.data().to_vec(),
                    Err(_) => vec![0.0; spec.out_channels],
                };
                let first_column = plan
                    .layers
                    .iter()
                    .find(|m| m.layer == i)
                    .map(|m| m.first_column)
                    .ok_or_else(|| Error::InvalidModel(format!("conv `{}` missing from plan", layer.name)))?;
                IntOp::Conv(IntConv {
                    in_channels: spec.in_channels,
                    out_channels: spec.out_channels,
                    kernel_size: spec.kernel_size,
                    stride: spec.stride,
                    pad: spec.pad(),
                    act_step: s_a,
                    weight_step: s_w,
                    adc_step: s_adc,
                    divisor: s_adc / s_a,
                    exact_scale: exact,
                    scale,
                    shift,
                    scale_error: (scale - exact).abs() / exact,
                    segment_channels: ranges.iter().map(|r| r.len()).collect(),
                    first_column,
                    columns,
                    bias,
                })
            }
            LayerKind::BatchNorm { channels } => {
                let t = |n: String| -> Result<Vec<f64>> { Ok(folded.params.tensor(&n)?.data().to_vec()) };
                IntOp::BatchNorm {
                    channels: *channels,
                    gamma: t(gamma_name(&layer.name))?,
                    beta: t(beta_name(&layer.name))?,
                    mean: t(mean_name(&layer.name))?,
                    var: t(var_name(&layer.name))?,
                }
            }
            LayerKind::Relu => IntOp::Relu,
            LayerKind::MaxPool { kernel, stride } => IntOp::MaxPool {
                kernel: *kernel,
                stride: *stride,
            },
            LayerKind::AvgPool => IntOp::AvgPool,
            LayerKind::Linear {
                in_features,
                out_features,
            } => IntOp::Linear {
                in_features: *in_features,
                out_features: *out_features,
                weight: folded.params.tensor(&layer.weight_name())?.data().to_vec(),
                bias: folded.params.tensor(&layer.bias_name())?.data().to_vec(),
            },
            LayerKind::ResidualAdd => IntOp::ResidualAdd,
        };
        layers.push(IntLayer {
            name: layer.name.clone(),
            inputs: layer.inputs.clone(),
            op,
        });
    }
    Ok(IntegerModel {
        name: folded.name.clone(),
        input_channels: folded.input_channels,
        input_resolution: folded.input_resolution,
        num_classes: folded.num_classes,
        macro_cfg: *cfg,
        power_of_two,
        layers,
    })
}

fn pack_weights(vals: impl Iterator<Item = i32>, nibbles: bool, out: &mut Vec<u8>) {
    if nibbles {
        let v: Vec<u8> = vals.map(|x| (x as u8) & 0x0f).collect();
        for pair in v.chunks(2) {
            out.push(pair[0] | pair.get(1).map_or(0, |h| h << 4));
        }
    } else {
        out.extend(vals.map(|x| x as i8 as u8));
    }
}

fn unpack_weights(buf: &mut &[u8], n: usize, nibbles: bool, what: &str) -> Result<Vec<i32>> {
    if nibbles {
        let bytes = take(buf, n.div_ceil(2), what)?;
        let sx = |b: u8| ((b << 4) as i8 >> 4) as i32;
        Ok((0..n)
            .map(|i| {
                let b = bytes[i / 2];
                sx(if i % 2 == 0 { b & 0x0f } else { b >> 4 })
            })
            .collect())
    } else {
        Ok(take(buf, n, what)?.iter().map(|&b| b as i8 as i32).collect())
    }
}

fn put_f64s(v: &[f64], out: &mut Vec<u8>) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn write_integer_model(m: &IntegerModel, w: &mut impl Write) -> Result<()> {
    let json = serde_json::to_vec(m)?;
    let nibbles = m.macro_cfg.weight_bits() <= 4;
    let mut body = Vec::new();
    for l in &m.layers {
        match &l.op {
            IntOp::Conv(c) => {
                pack_weights(c.columns.iter().flatten().copied(), nibbles, &mut body);
                put_f64s(&c.bias, &mut body);
            }
            IntOp::BatchNorm {
                gamma, beta, mean, var, ..
            } => {
                for v in [gamma, beta, mean, var] {
                    put_f64s(v, &mut body);
                }
            }
            IntOp::Linear { weight, bias, .. } => {
                put_f64s(weight, &mut body);
                put_f64s(bias, &mut body);
            }
            _ => {}
        }
    }
    w.write_all(MAGIC)?;
    w.write_all(&INTEGER_MODEL_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&body)?;
    Ok(())
}

pub fn read_integer_model(r: &mut impl Read) -> Result<IntegerModel> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut buf = &bytes[..];
    let json = read_prefix(&mut buf, MAGIC, INTEGER_MODEL_VERSION, || Error::NotAnIntegerModel)?;
    let mut m: IntegerModel = serde_json::from_slice(json)?;
    let nibbles = m.macro_cfg.weight_bits() <= 4;
    for l in &mut m.layers {
        let name = l.name.clone();
        match &mut l.op {
            IntOp::Conv(c) => {
                let cols = c.segments() * c.out_channels;
                let total: usize = (0..cols).map(|col| c.rows(col)).sum();
                let flat = unpack_weights(&mut buf, total, nibbles, &name)?;
                let mut it = flat.into_iter();
                c.columns = (0..cols).map(|col| it.by_ref().take(c.rows(col)).collect()).collect();
                c.bias = read_f64s(&mut buf, c.out_channels, &name)?;
            }
            IntOp::BatchNorm {
                channels,
                gamma,
                beta,
                mean,
                var,
            } => {
                for v in [gamma, beta, mean, var] {
                    *v = read_f64s(&mut buf, *channels, &name)?;
                }
            }
            IntOp::Linear {
                in_features,
                out_features,
                weight,
                bias,
            } => {
                *weight = read_f64s(&mut buf, *in_features * *out_features, &name)?;
                *bias = read_f64s(&mut buf, *out_features, &name)?;
            }
            _ => {}
        }
    }
    if !buf.is_empty() {
        return Err(Error::InvalidModel(format!("{} trailing bytes in integer model", buf.len())));
    }
    Ok(m)
}

pub fn save_integer_model(m: &IntegerModel, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_integer_model(m, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_integer_model(path: impl AsRef<Path>) -> Result<IntegerModel> {
    read_integer_model(&mut fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builders, toy_cnn, weight_step_name};
    use crate::qat::stages::{attach_act_quant, attach_weight_quant, calibrate_adc_step};
    use crate::rng;
    use crate::tensor::Tensor;

    fn quantized_toy() -> ModelGraph {
        let cfg = MacroConfig::default();
        let mut m = toy_cnn(3, 8, 2, &mut rng(5)).unwrap();
        let x = Tensor::full(&[2, 3, 8, 8], 0.4);
        attach_act_quant(&mut m, &cfg, &x).unwrap();
        attach_weight_quant(&mut m, &cfg).unwrap();
        calibrate_adc_step(&mut m, &cfg, &x, 99.9).unwrap();
        m
    }

    #[test]
    fn nibble_packing_roundtrip() {
        let vals: Vec<i32> = (-8..8).chain([3]).collect();
        let mut buf = Vec::new();
        pack_weights(vals.iter().copied(), true, &mut buf);
        assert_eq!(buf.len(), 9);
        let mut s = &buf[..];
        assert_eq!(unpack_weights(&mut s, vals.len(), true, "w").unwrap(), vals);
    }

    #[test]
    fn file_roundtrip_is_exact() {
        let im = export_integer_model(&quantized_toy(), &MacroConfig::default(), false).unwrap();
        let mut buf = Vec::new();
        write_integer_model(&im, &mut buf).unwrap();
        assert_eq!(read_integer_model(&mut &buf[..]).unwrap(), im);
        assert!(matches!(read_integer_model(&mut &b"CIMCKPT\0xxxx"[..]), Err(Error::NotAnIntegerModel)));
        assert!(matches!(read_integer_model(&mut &buf[..buf.len() - 3]), Err(Error::Truncated(_))));
    }

    #[test]
    fn columns_follow_segment_layout() {
        let cfg = MacroConfig::default();
        // 56 input channels at k=3 split into two 28-channel segments
        let mut m = builders::tests::single_conv(56, 4, 3, 4);
        let x = Tensor::full(&[1, 56, 4, 4], 0.3);
        attach_act_quant(&mut m, &cfg, &x).unwrap();
        attach_weight_quant(&mut m, &cfg).unwrap();
        calibrate_adc_step(&mut m, &cfg, &x, 99.9).unwrap();
        let im = export_integer_model(&m, &cfg, false).unwrap();
        let (_, l, c) = im.convs().next().unwrap();
        assert_eq!(c.segment_channels, vec![28, 28]);
        assert_eq!(c.columns.len(), 8);
        assert!(c.columns.iter().all(|col| col.len() == 252));
        let folded = fold_bn(&m).unwrap();
        let w = folded.params.tensor(&format!("{}.weight", l.name)).unwrap();
        let s_w = m.params.scalar(&weight_step_name(&l.name)).unwrap();
        // column 5 = segment 1, filter 1; first row = channel 28, ky 0, kx 0
        let v = w.data()[56 * 9 + 28 * 9];
        assert_eq!(c.columns[5][0], quantize_value(v, s_w, cfg.weight_bounds()) as i32);
    }

    #[test]
    fn power_of_two_scales() {
        let mut m = quantized_toy();
        let cfg = MacroConfig::default();
        for (n, v) in [("conv1", 0.25), ("conv2", 0.3)] {
            m.params.insert(weight_step_name(n), Tensor::scalar(v), true);
            m.params.insert(crate::model::adc_step_name(n), Tensor::scalar(1.0), false);
        }
        let im = export_integer_model(&m, &cfg, true).unwrap();
        let errs: std::collections::BTreeMap<_, _> = im.scale_errors().into_iter().collect();
        assert_eq!(errs["conv1"], 0.0);
        assert!((errs["conv2"] - 0.05 / 0.3).abs() < 1e-12);
        let (_, _, c2) = im.convs().nth(1).unwrap();
        assert_eq!((c2.scale, c2.shift), (0.25, Some(-2)));

        m.params.insert(weight_step_name("conv1"), Tensor::scalar(1e-12), true);
        assert!(matches!(
            export_integer_model(&m, &cfg, true),
            Err(Error::ScaleOutOfRange { ref layer, .. }) if layer == "conv1"
        ));
    }
}
