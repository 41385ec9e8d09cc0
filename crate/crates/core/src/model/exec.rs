//! Graph executor: records one forward pass of a [`ModelGraph`] on a [`Graph`].

use std::collections::BTreeMap;

use super::{beta_name, gamma_name, mean_name, var_name, LayerKind, ModelGraph, Source};
use crate::autograd::{BatchStats, Graph, ParamBinder, Var, BN_EPS};
use crate::config::{channels_per_bitline, MacroConfig};
use crate::error::{Error, Result};
use crate::qat::{grad_scale, PsumParams};

/// Arithmetic used for the convolutions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    Float,
    /// Batchnorm folded into the conv with running statistics, weights
    /// fake-quantized with the learned weight step.
    WeightQuant,
    /// As [`Precision::WeightQuant`], with segmented ADC partial-sum quantization.
    PsumQuant,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    /// Batchnorm uses batch statistics (returned for the running update).
    pub train_bn: bool,
    /// Apply attached activation quantizers to conv inputs.
    pub act_quant: bool,
    pub precision: Precision,
    /// Required for quantized precisions.
    pub macro_cfg: Option<&'a MacroConfig>,
    /// Per-batchnorm channel masks applied to its output.
    pub masks: Option<&'a BTreeMap<usize, Vec<f64>>>,
    /// Keep conv inputs and effective weights/biases.
    pub record: bool,
}

#[derive(Default)]
pub struct ForwardOutput {
    pub logits: Var,
    pub bn_stats: Vec<(usize, BatchStats)>,
    /// Conv input after activation quantization, by conv layer index.
    pub conv_inputs: BTreeMap<usize, crate::tensor::Tensor>,
    /// Weight the conv multiplied by (folded, fake-quantized where applicable).
    pub conv_weights: BTreeMap<usize, crate::tensor::Tensor>,
    /// Bias added after the conv, if any.
    pub conv_bias: BTreeMap<usize, Vec<f64>>,
}

impl Default for Var {
    fn default() -> Self {
        Var(0)
    }
}

fn param(g: &mut Graph, b: &mut ParamBinder, m: &ModelGraph, name: &str) -> Result<Var> {
    b.bind_name(g, &m.params, name)
}

/// Record the forward pass of `model` on input `x` (NCHW).
pub fn forward(
    g: &mut Graph,
    model: &ModelGraph,
    binder: &mut ParamBinder,
    x: Var,
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    let quantized = opts.precision != Precision::Float;
    let cfg = match (quantized || opts.act_quant, opts.macro_cfg) {
        (true, None) => {
            return Err(Error::InvalidArgument(
                "quantized forward needs a macro config".into(),
            ))
        }
        (_, c) => c,
    };
    let mut out = ForwardOutput::default();
    let mut vals: Vec<Var> = Vec::with_capacity(model.layers.len());
    // batchnorms already absorbed into their conv in quantized modes
    let mut absorbed = vec![false; model.layers.len()];
    for (i, layer) in model.layers.iter().enumerate() {
        let ins: Vec<Var> = model
            .sources(i)
            .iter()
            .map(|s| match s {
                Source::Input => x,
                Source::Layer(j) => vals[*j],
            })
            .collect();
        let v = match &layer.kind {
            LayerKind::Conv(spec) => {
                let mut input = ins[0];
                if let (Some(name), true) = (&layer.quant.act, opts.act_quant || quantized) {
                    let c = cfg.expect("checked above");
                    let s = param(g, binder, model, name)?;
                    let bounds = c.act_bounds();
                    let n = g.value(input).shape()[0].max(1);
                    let gs = grad_scale(g.value(input).numel() / n, bounds);
                    input = g.lsq_quantize(input, s, bounds, gs)?;
                } else if quantized {
                    return Err(Error::InvalidModel(format!(
                        "conv `{}` has no activation quantizer",
                        layer.name
                    )));
                }
                let mut w = param(g, binder, model, &layer.weight_name())?;
                let mut bias = if model.params.contains(&layer.bias_name()) {
                    Some(param(g, binder, model, &layer.bias_name())?)
                } else {
                    None
                };
                if quantized {
                    let c = cfg.expect("checked above");
                    if let Some(bi) = model
                        .bn_after(i)
                        .filter(|&bi| bi == i + 1 && model.sources(bi) == [Source::Layer(i)])
                    {
                        let bn = &model.layers[bi].name;
                        let gm = param(g, binder, model, &gamma_name(bn))?;
                        let bt = param(g, binder, model, &beta_name(bn))?;
                        let mu = model.params.tensor(&mean_name(bn))?.data().to_vec();
                        let var = model.params.tensor(&var_name(bn))?.data().to_vec();
                        let (wf, bf) = g.fold_conv_bn(w, bias, gm, bt, &mu, &var)?;
                        w = wf;
                        bias = Some(bf);
                        absorbed[bi] = true;
                    }
                    let sname = layer.quant.weight.as_ref().ok_or_else(|| {
                        Error::InvalidModel(format!("conv `{}` has no weight quantizer", layer.name))
                    })?;
                    let s = param(g, binder, model, sname)?;
                    let bounds = c.weight_bounds();
                    let gs = grad_scale(g.value(w).numel(), bounds);
                    w = g.lsq_quantize(w, s, bounds, gs)?;
                }
                let y = if opts.precision == Precision::PsumQuant {
                    let c = cfg.expect("checked above");
                    let step = |n: &Option<String>, what: &str| -> Result<f64> {
                        let n = n.as_ref().ok_or_else(|| {
                            Error::InvalidModel(format!("conv `{}` has no {what} step", layer.name))
                        })?;
                        model.params.scalar(n)
                    };
                    let p = PsumParams {
                        act_step: step(&layer.quant.act, "activation")?,
                        weight_step: step(&layer.quant.weight, "weight")?,
                        adc_step: step(&layer.quant.psum, "ADC")?,
                        stride: spec.stride,
                        pad: spec.pad(),
                        segments: crate::mapper::segment_ranges(
                            spec.in_channels,
                            channels_per_bitline(c, spec.kernel_size)?,
                        ),
                        adc: c.adc_bounds(),
                    };
                    g.psum_conv(input, w, &p)?
                } else {
                    g.conv2d(input, w, spec.stride, spec.pad())?
                };
                if opts.record {
                    out.conv_inputs.insert(i, g.value(input).clone());
                    out.conv_weights.insert(i, g.value(w).clone());
                    if let Some(b) = bias {
                        out.conv_bias.insert(i, g.value(b).data().to_vec());
                    }
                }
                match bias {
                    Some(b) => g.add_channel_bias(y, b)?,
                    None => y,
                }
            }
            LayerKind::BatchNorm { .. } => {
                let mut y = if absorbed[i] {
                    ins[0]
                } else {
                    let gm = param(g, binder, model, &gamma_name(&layer.name))?;
                    let bt = param(g, binder, model, &beta_name(&layer.name))?;
                    if opts.train_bn && !quantized {
                        let (y, st) = g.batch_norm_train(ins[0], gm, bt, BN_EPS)?;
                        out.bn_stats.push((i, st));
                        y
                    } else {
                        let mu = model.params.tensor(&mean_name(&layer.name))?.data().to_vec();
                        let var = model.params.tensor(&var_name(&layer.name))?.data().to_vec();
                        g.batch_norm_eval(ins[0], gm, bt, &mu, &var, BN_EPS)?
                    }
                };
                if let Some(mask) = opts.masks.and_then(|m| m.get(&i)) {
                    y = g.channel_mask(y, mask)?;
                }
                y
            }
            LayerKind::Relu => g.relu(ins[0]),
            LayerKind::MaxPool { kernel, stride } => g.max_pool2d(ins[0], *kernel, *stride)?,
            LayerKind::AvgPool => g.global_avg_pool(ins[0])?,
            LayerKind::Linear { .. } => {
                let w = param(g, binder, model, &layer.weight_name())?;
                let b = param(g, binder, model, &layer.bias_name())?;
                g.linear(ins[0], w, Some(b))?
            }
            LayerKind::ResidualAdd => g.add(ins[0], ins[1])?,
        };
        vals.push(v);
    }
    out.logits = *vals.last().expect("validated model has layers");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builders, toy_cnn};
    use crate::rng;
    use crate::tensor::Tensor;

    #[test]
    fn logits_shape_and_bn_stats() {
        let m = toy_cnn(3, 8, 5, &mut rng(0)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3, 8, 8], 0.5));
        let opts = ForwardOptions {
            train_bn: true,
            ..Default::default()
        };
        let out = forward(&mut g, &m, &mut ParamBinder::new(), x, &opts).unwrap();
        assert_eq!(g.value(out.logits).shape(), &[2, 5]);
        assert_eq!(out.bn_stats.len(), 4);
    }

    #[test]
    fn quantized_forward_needs_macro() {
        let m = builders::tests::single_conv(3, 4, 3, 4);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let opts = ForwardOptions {
            precision: Precision::WeightQuant,
            ..Default::default()
        };
        assert!(forward(&mut g, &m, &mut ParamBinder::new(), x, &opts).is_err());
    }

    #[test]
    fn gradients_reach_every_trainable_param() {
        let mut m = toy_cnn(3, 8, 3, &mut rng(1)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3, 8, 8], 0.3));
        let opts = ForwardOptions {
            train_bn: true,
            ..Default::default()
        };
        let out = forward(&mut g, &m, &mut ParamBinder::new(), x, &opts).unwrap();
        let loss = g.cross_entropy(out.logits, &[0, 2]).unwrap();
        g.backward(loss, &mut m.params).unwrap();
        for p in m.params.iter().filter(|p| p.trainable) {
            assert!(p.grad.is_some(), "{}", p.name);
        }
    }
}
