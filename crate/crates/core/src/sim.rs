//! Bit-exact integer simulator of the macro datapath.
//!
//! Inputs pass through the DAC quantizer, each bitline column accumulates
//! exact integer products over its wordlines, every column output crosses an
//! ADC, and the adder tree sums a filter's segment codes before digital
//! scaling. Bitline `b` of a tile is read by ADC `b mod adc_count`, so one
//! output position needs as many cycles as the busiest ADC has columns.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::kernels::{dot, maxpool_forward, output_size};
use crate::autograd::BN_EPS;
use crate::config::MacroConfig;
use crate::error::{Error, Result};
use crate::model::Source;
use crate::qat::{adc_code, quantize_value, IntConv, IntOp, IntegerModel};
use crate::tensor::Tensor;

/// `Qa = round(clip(x / S_A, 0, 2^dac_bits - 1))`.
pub fn dac_quantize_input(x: &[f64], act_step: f64, cfg: &MacroConfig) -> Result<Vec<i32>> {
    if !(act_step > 0.0 && act_step.is_finite()) {
        return Err(Error::InvalidArgument(format!("activation step must be positive, got {act_step}")));
    }
    let b = cfg.act_bounds();
    Ok(x.iter().map(|&v| quantize_value(v, act_step, b) as i32).collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub layer: String,
    pub conversions: usize,
    pub cycles: usize,
    pub clipped: usize,
    pub max_abs_psum: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimTrace {
    pub layers: Vec<LayerTrace>,
}

impl SimTrace {
    pub fn conversions(&self) -> usize {
        self.layers.iter().map(|l| l.conversions).sum()
    }

    pub fn cycles(&self) -> usize {
        self.layers.iter().map(|l| l.cycles).sum()
    }

    pub fn clipped(&self) -> usize {
        self.layers.iter().map(|l| l.clipped).sum()
    }

    pub fn max_abs_psum(&self) -> i64 {
        self.layers.iter().map(|l| l.max_abs_psum).max().unwrap_or(0)
    }
}

/// ADC codes of one conv for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCodes {
    /// Per segment, codes in `[o, oh, ow]` order.
    pub codes: Vec<Vec<i32>>,
    /// Adder-tree sums in `[o, oh, ow]` order.
    pub acc: Vec<i64>,
    pub out_h: usize,
    pub out_w: usize,
}

/// Run one conv on integer activations `qa` of shape `(c, h, w)`.
pub fn simulate_layer(
    name: &str,
    qa: &[i32],
    (c, h, w): (usize, usize, usize),
    conv: &IntConv,
    cfg: &MacroConfig,
) -> Result<(LayerCodes, LayerTrace)> {
    if c != conv.in_channels || qa.len() != c * h * w {
        return Err(Error::shape(
            "simulate_layer",
            format!("{name}: input ({c}, {h}, {w}) with {} values for {} channels", qa.len(), conv.in_channels),
        ));
    }
    let k = conv.kernel_size;
    if h + 2 * conv.pad < k || w + 2 * conv.pad < k {
        return Err(Error::shape("simulate_layer", format!("{name}: {h}x{w} input smaller than kernel {k}")));
    }
    let oh = output_size(h, k, conv.stride, conv.pad);
    let ow = output_size(w, k, conv.stride, conv.pad);
    let o = conv.out_channels;
    let segs = conv.segments();
    let adc = cfg.adc_bounds();
    let bound = (cfg.wordlines() as f64 * cfg.weight_bounds().hi() * cfg.dac_max() as f64) as i64;
    let mut codes = vec![vec![0i32; o * oh * ow]; segs];
    let mut acc = vec![0i64; o * oh * ow];
    let mut trace = LayerTrace {
        layer: name.to_string(),
        ..Default::default()
    };

    // ADC load per tile for one output position
    let bl = cfg.bitlines_per_macro();
    let n_adc = cfg.adc_count();
    let mut per_tile: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for col in 0..segs * o {
        let g = conv.first_column + col;
        per_tile.entry(g / bl).or_insert_with(|| vec![0; n_adc])[(g % bl) % n_adc] += 1;
    }
    let cycles_per_position: usize = per_tile.values().map(|a| *a.iter().max().unwrap_or(&0)).sum();

    let mut patch: Vec<i32> = Vec::new();
    for oy in 0..oh {
        for ox in 0..ow {
            let pos = oy * ow + ox;
            for s in 0..segs {
                let c0 = conv.segment_start(s);
                let sc = conv.segment_channels[s];
                patch.clear();
                for ch in c0..c0 + sc {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                            let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                            patch.push(if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                qa[(ch * h + iy as usize) * w + ix as usize]
                            } else {
                                0
                            });
                        }
                    }
                }
                for f in 0..o {
                    let col = &conv.columns[s * o + f];
                    let p: i64 = col.iter().zip(&patch).map(|(&a, &b)| a as i64 * b as i64).sum();
                    if p.abs() > bound {
                        return Err(Error::AccumulatorOverflow {
                            layer: name.to_string(),
                            value: p,
                        });
                    }
                    trace.max_abs_psum = trace.max_abs_psum.max(p.abs());
                    let pf = p as f64;
                    if !adc.contains(pf / conv.divisor) {
                        trace.clipped += 1;
                    }
                    let code = adc_code(pf, conv.divisor, adc) as i32;
                    codes[s][f * oh * ow + pos] = code;
                    acc[f * oh * ow + pos] += code as i64;
                }
                trace.conversions += o;
            }
            trace.cycles += cycles_per_position;
        }
    }
    Ok((
        LayerCodes {
            codes,
            acc,
            out_h: oh,
            out_w: ow,
        },
        trace,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub logits: Vec<f64>,
    pub trace: SimTrace,
    /// ADC codes by conv layer name.
    pub codes: BTreeMap<String, LayerCodes>,
}

/// Activation between layers: `(c, h, w)` and values.
#[derive(Clone)]
struct Act {
    shape: (usize, usize, usize),
    data: Vec<f64>,
}

/// Run one image (`[c, h, w]` or `[1, c, h, w]`) through the integer model.
pub fn simulate_inference(m: &IntegerModel, image: &Tensor) -> Result<SimOutput> {
    let shape = match image.shape() {
        [c, h, w] | [1, c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape("simulate_inference", format!("expected one CHW image, got {s:?}"))),
    };
    if shape.0 != m.input_channels {
        return Err(Error::shape(
            "simulate_inference",
            format!("image has {} channels, model expects {}", shape.0, m.input_channels),
        ));
    }
    let cfg = &m.macro_cfg;
    let input = Act {
        shape,
        data: image.data().to_vec(),
    };
    let mut vals: Vec<Act> = Vec::with_capacity(m.layers.len());
    let mut trace = SimTrace::default();
    let mut codes = BTreeMap::new();
    for (i, layer) in m.layers.iter().enumerate() {
        let ins: Vec<&Act> = m
            .sources(i)
            .iter()
            .map(|s| match s {
                Source::Input => &input,
                Source::Layer(j) => &vals[*j],
            })
            .collect();
        let x = ins[0];
        let (c, h, w) = x.shape;
        let out = match &layer.op {
            IntOp::Conv(conv) => {
                let qa = dac_quantize_input(&x.data, conv.act_step, cfg)?;
                let (lc, lt) = simulate_layer(&layer.name, &qa, x.shape, conv, cfg)?;
                let hw = lc.out_h * lc.out_w;
                let data = lc
                    .acc
                    .iter()
                    .enumerate()
                    .map(|(idx, &a)| a as f64 * conv.scale + conv.bias[idx / hw])
                    .collect();
                let shape = (conv.out_channels, lc.out_h, lc.out_w);
                trace.layers.push(lt);
                codes.insert(layer.name.clone(), lc);
                Act { shape, data }
            }
            IntOp::BatchNorm {
                gamma, beta, mean, var, ..
            } => {
                if gamma.len() != c {
                    return Err(Error::shape("simulate_inference", format!("{}: batchnorm over {c} channels", layer.name)));
                }
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let hw = h * w;
                let data = x
                    .data
                    .iter()
                    .enumerate()
                    .map(|(idx, &v)| {
                        let ch = idx / hw;
                        gamma[ch] * (v - mean[ch]) * inv[ch] + beta[ch]
                    })
                    .collect();
                Act { shape: x.shape, data }
            }
            IntOp::Relu => Act {
                shape: x.shape,
                data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            },
            IntOp::MaxPool { kernel, stride } => {
                if h < *kernel || w < *kernel {
                    return Err(Error::shape("simulate_inference", format!("{}: pool larger than input", layer.name)));
                }
                let (data, _, oh, ow) = maxpool_forward(&x.data, (1, c, h, w), *kernel, *stride);
                Act { shape: (c, oh, ow), data }
            }
            IntOp::AvgPool => {
                let hw = h * w;
                Act {
                    shape: (c, 1, 1),
                    data: x.data.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect(),
                }
            }
            IntOp::Linear {
                in_features,
                out_features,
                weight,
                bias,
            } => {
                if x.data.len() != *in_features {
                    return Err(Error::shape(
                        "simulate_inference",
                        format!("{}: {} features into linear expecting {in_features}", layer.name, x.data.len()),
                    ));
                }
                let data = (0..*out_features)
                    .map(|o| {
                        let mut v = dot(&weight[o * in_features..(o + 1) * in_features], &x.data);
                        v += bias[o];
                        v
                    })
                    .collect();
                Act {
                    shape: (*out_features, 1, 1),
                    data,
                }
            }
            IntOp::ResidualAdd => {
                let y = ins.get(1).ok_or_else(|| {
                    Error::shape("simulate_inference", format!("{}: residual add needs two inputs", layer.name))
                })?;
                if y.shape != x.shape {
                    return Err(Error::shape("simulate_inference", format!("{}: {:?} + {:?}", layer.name, x.shape, y.shape)));
                }
                Act {
                    shape: x.shape,
                    data: x.data.iter().zip(&y.data).map(|(a, b)| a + b).collect(),
                }
            }
        };
        vals.push(out);
    }
    let logits = vals.pop().map(|a| a.data).unwrap_or_default();
    Ok(SimOutput { logits, trace, codes })
}
