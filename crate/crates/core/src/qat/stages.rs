//! Quantizer attachment, Phase-1 / Phase-2 training and ADC step calibration.

use std::collections::BTreeMap;

use log::info;

use super::psum::{psum_codes, to_integers, PsumParams};
use crate::autograd::Graph;
use crate::config::{channels_per_bitline, MacroConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{
    act_step_name, adc_step_name, fold_bn, forward, weight_step_name, ForwardOptions, ModelGraph, Precision,
};
use crate::tensor::Tensor;
use crate::train::{train, EpochLog, TrainConfig};
use crate::Rng;

/// Smallest step any initializer or calibration may produce.
pub const STEP_FLOOR: f64 = 1e-8;

pub fn is_step_param(name: &str) -> bool {
    name.ends_with(".act_step") || name.ends_with(".weight_step") || name.ends_with(".adc_step")
}

pub fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// Forward options for a quantized precision on `cfg`.
pub fn quantized(cfg: &MacroConfig, precision: Precision) -> ForwardOptions<'_> {
    ForwardOptions {
        act_quant: true,
        precision,
        macro_cfg: Some(cfg),
        ..Default::default()
    }
}

fn mean_abs(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64
    }
}

/// `2 * mean|x| / sqrt(q_p)`, floored.
pub fn lsq_init(values: &[f64], q_p: f64) -> f64 {
    (2.0 * mean_abs(values) / q_p.max(1.0).sqrt()).max(STEP_FLOOR)
}

/// Attach an unsigned DAC-range activation quantizer in front of every conv,
/// initializing each step from the conv inputs a float forward sees on `sample`.
pub fn attach_act_quant(model: &mut ModelGraph, cfg: &MacroConfig, sample: &Tensor) -> Result<()> {
    if sample.numel() == 0 {
        return Err(Error::Dataset("empty activation calibration batch".into()));
    }
    let mut g = Graph::new();
    let x = g.constant(sample.clone());
    let opts = ForwardOptions {
        record: true,
        ..Default::default()
    };
    let out = forward(&mut g, model, &mut crate::autograd::ParamBinder::frozen(), x, &opts)?;
    let q_p = cfg.act_bounds().hi();
    for (ci, input) in out.conv_inputs {
        let name = act_step_name(&model.layers[ci].name);
        let s = lsq_init(input.data(), q_p);
        model.params.insert(name.clone(), Tensor::scalar(s), true);
        model.layers[ci].quant.act = Some(name);
    }
    Ok(())
}

/// Attach a weight quantizer to every conv, initialized from the
/// batchnorm-folded weights. Existing weight steps are kept.
pub fn attach_weight_quant(model: &mut ModelGraph, cfg: &MacroConfig) -> Result<()> {
    let folded = fold_bn(model)?;
    let q_p = cfg.weight_bounds().hi();
    for ci in model.conv_indices() {
        let conv = model.layers[ci].name.clone();
        let name = weight_step_name(&conv);
        if model.params.contains(&name) {
            model.layers[ci].quant.weight = Some(name);
            continue;
        }
        let w = folded.params.tensor(&model.layers[ci].weight_name())?;
        model.params.insert(name.clone(), Tensor::scalar(lsq_init(w.data(), q_p)), true);
        model.layers[ci].quant.weight = Some(name);
    }
    Ok(())
}

fn require_act_quant(model: &ModelGraph) -> Result<()> {
    for ci in model.conv_indices() {
        if model.layers[ci].quant.act.is_none() {
            return Err(Error::InvalidModel(format!(
                "conv `{}` has no activation quantizer; train the seed model with activation quantization first",
                model.layers[ci].name
            )));
        }
    }
    Ok(())
}

/// Weight-only quantization-aware training with batchnorm folded into each
/// conv using its running statistics. Learns the weight steps alongside the
/// weights and batchnorm affine parameters; activation steps stay frozen.
pub fn phase1_train(
    model: &mut ModelGraph,
    data: &Dataset,
    cfg: &MacroConfig,
    train_cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<EpochLog>> {
    require_act_quant(model)?;
    attach_weight_quant(model, cfg)?;
    model.set_trainable(|n| {
        !is_running_stat(n) && !n.ends_with(".act_step") && !n.ends_with(".adc_step")
    });
    let logs = train(model, data, train_cfg, &quantized(cfg, Precision::WeightQuant), rng, None)?;
    info!("phase 1 done after {} epochs", logs.len());
    Ok(logs)
}

/// Nearest-rank percentile, `p` in `[0, 100]`: the smallest value with at
/// least `p`% of the values at or below it.
pub fn percentile(values: &mut [f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    // tolerance keeps exact ranks like 0.5 * 4 from rounding up
    let rank = ((p / 100.0).clamp(0.0, 1.0) * n as f64 - 1e-9).ceil() as usize;
    values[rank.clamp(1, n) - 1]
}

/// Per-conv ADC step `percentile(|p * S_A|, pct) / q_p_adc` over the integer
/// partial sums `p` each conv produces on `batch`. Layers are calibrated in
/// order, each seeing inputs from already-calibrated ADCs upstream. Attaches
/// the steps as frozen parameters and returns them by conv name.
pub fn calibrate_adc_step(
    model: &mut ModelGraph,
    cfg: &MacroConfig,
    batch: &Tensor,
    pct: f64,
) -> Result<BTreeMap<String, f64>> {
    if batch.numel() == 0 || batch.shape().first() == Some(&0) {
        return Err(Error::Dataset("empty ADC calibration batch".into()));
    }
    require_act_quant(model)?;
    attach_weight_quant(model, cfg)?;
    let convs = model.conv_indices();
    for &ci in &convs {
        // placeholder until the layer is calibrated; only downstream layers see it
        let conv = model.layers[ci].name.clone();
        let name = adc_step_name(&conv);
        model.params.insert(name.clone(), Tensor::scalar(1.0), false);
        model.layers[ci].quant.psum = Some(name);
    }
    let q_p = cfg.adc_bounds().hi();
    let mut steps = BTreeMap::new();
    for &ci in &convs {
        let codes = layer_codes(model, cfg, batch)?;
        let s_a = model.params.scalar(model.layers[ci].quant.act.as_deref().expect("checked"))?;
        let mut mags: Vec<f64> = codes[&ci].partials.iter().flatten().map(|v| (v * s_a).abs()).collect();
        let s_adc = (percentile(&mut mags, pct) / q_p).max(STEP_FLOOR);
        let conv = model.layers[ci].name.clone();
        model.params.insert(adc_step_name(&conv), Tensor::scalar(s_adc), false);
        steps.insert(conv, s_adc);
    }
    Ok(steps)
}

/// Fraction of partial sums the ADCs clip on `batch` under the attached steps.
pub fn clipping_rate(model: &ModelGraph, cfg: &MacroConfig, batch: &Tensor) -> Result<f64> {
    let stats = psum_stats(model, cfg, batch)?;
    let (clipped, total) = stats.values().fold((0, 0), |(c, t), s| (c + s.0, t + s.1));
    Ok(if total == 0 { 0.0 } else { clipped as f64 / total as f64 })
}

/// Per conv layer `(clipped, conversions)` on `batch`, using the psum-quantized forward.
pub fn psum_stats(model: &ModelGraph, cfg: &MacroConfig, batch: &Tensor) -> Result<BTreeMap<usize, (usize, usize)>> {
    let codes = layer_codes(model, cfg, batch)?;
    Ok(codes.into_iter().map(|(k, c)| (k, (c.clipped(), c.conversions()))).collect())
}

/// ADC codes of every conv, recomputed from the inputs and weights the
/// psum-quantized training forward records.
pub fn layer_codes(
    model: &ModelGraph,
    cfg: &MacroConfig,
    batch: &Tensor,
) -> Result<BTreeMap<usize, super::psum::PsumCodes>> {
    let mut g = Graph::new();
    let x = g.constant(batch.clone());
    let opts = ForwardOptions {
        record: true,
        ..quantized(cfg, Precision::PsumQuant)
    };
    let out = forward(&mut g, model, &mut crate::autograd::ParamBinder::frozen(), x, &opts)?;
    let mut res = BTreeMap::new();
    for ci in model.conv_indices() {
        let layer = &model.layers[ci];
        let spec = model.conv_spec(ci)?;
        let scalar = |n: &Option<String>| -> Result<f64> {
            model.params.scalar(n.as_deref().ok_or_else(|| {
                Error::InvalidModel(format!("conv `{}` is missing a quantizer", layer.name))
            })?)
        };
        let p = PsumParams {
            act_step: scalar(&layer.quant.act)?,
            weight_step: scalar(&layer.quant.weight)?,
            adc_step: scalar(&layer.quant.psum)?,
            stride: spec.stride,
            pad: spec.pad(),
            segments: crate::mapper::segment_ranges(spec.in_channels, channels_per_bitline(cfg, spec.kernel_size)?),
            adc: cfg.adc_bounds(),
        };
        let qa = to_integers(&out.conv_inputs[&ci], p.act_step);
        let qw = to_integers(&out.conv_weights[&ci], p.weight_step);
        res.insert(ci, psum_codes(&qa, &qw, &p)?);
    }
    Ok(res)
}

/// Partial-sum quantization-aware training: only conv weights, batchnorm
/// affine parameters and the classifier move; every step is frozen.
pub fn phase2_train(
    model: &mut ModelGraph,
    data: &Dataset,
    cfg: &MacroConfig,
    train_cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<EpochLog>> {
    require_act_quant(model)?;
    for ci in model.conv_indices() {
        let l = &model.layers[ci];
        if l.quant.weight.is_none() || l.quant.psum.is_none() {
            return Err(Error::InvalidModel(format!(
                "conv `{}` lacks a weight or ADC step; run phase 1 and calibration first",
                l.name
            )));
        }
    }
    model.set_trainable(|n| !is_running_stat(n) && !is_step_param(n));
    let logs = train(model, data, train_cfg, &quantized(cfg, Precision::PsumQuant), rng, None)?;
    info!("phase 2 done after {} epochs", logs.len());
    Ok(logs)
}
