//! Parameter-count regularizer over batchnorm scales.
//!
//! For conv `L` with kernel `k`, input channel space `I` and output space `O`:
//! `F_L = k² · (A_L · Σ|γ_O| + B_L · Σ|γ_I|)` where `A_L` counts the live
//! input channels and `B_L` the live output channels (`|γ| > τ`). Each
//! factor multiplies the scales of the opposite side, so `F_L` tracks the
//! layer's surviving parameter count. The image input has no scales; its
//! channel count is fixed.

use std::collections::BTreeMap;

use crate::autograd::{Graph, ParamBinder, Var};
use crate::error::{Error, Result};
use crate::model::{gamma_name, ModelGraph, SpaceId};

/// Live-channel mask of a space: a channel survives if any of its batchnorms keeps it.
pub fn space_mask(model: &ModelGraph, bns: &[usize], channels: usize, tau: f64) -> Result<Vec<bool>> {
    let mut keep = vec![false; channels];
    for &b in bns {
        let g = model.params.tensor(&gamma_name(&model.layers[b].name))?;
        for (k, v) in keep.iter_mut().zip(g.data()) {
            *k |= v.abs() > tau;
        }
    }
    Ok(keep)
}

/// Coefficient multiplying `Σ|γ|` of each batchnorm (by layer index).
pub fn gamma_coefficients(model: &ModelGraph, tau: f64) -> Result<BTreeMap<usize, f64>> {
    let spaces = model.spaces()?;
    let alive = |s: SpaceId| -> Result<usize> {
        let sp = spaces.get(s);
        if sp.is_input {
            return Ok(sp.channels);
        }
        Ok(space_mask(model, &sp.batchnorms, sp.channels, tau)?.iter().filter(|k| **k).count())
    };
    let mut coef: BTreeMap<usize, f64> = BTreeMap::new();
    for ci in model.conv_indices() {
        let spec = model.conv_spec(ci)?;
        let k2 = (spec.kernel_size * spec.kernel_size) as f64;
        let own = spaces.of_layer(ci).expect("conv has a space");
        let inp = spaces.source_space(model, ci).expect("conv reads a feature map");
        let missing = || Error::MissingBatchNorm(model.layers[ci].name.clone());
        if spaces.get(own).batchnorms.is_empty() {
            return Err(missing());
        }
        let input = spaces.get(inp);
        if !input.is_input && input.batchnorms.is_empty() {
            return Err(missing());
        }
        let a = alive(inp)? as f64;
        let b = alive(own)? as f64;
        for &bn in &spaces.get(own).batchnorms {
            *coef.entry(bn).or_default() += k2 * a;
        }
        for &bn in &input.batchnorms {
            *coef.entry(bn).or_default() += k2 * b;
        }
    }
    Ok(coef)
}

/// Value of the regularizer at the current scales.
pub fn regularizer_f(model: &ModelGraph, tau: f64) -> Result<f64> {
    let coef = gamma_coefficients(model, tau)?;
    let mut f = 0.0;
    for (bn, c) in coef {
        let g = model.params.tensor(&gamma_name(&model.layers[bn].name))?;
        f += c * g.data().iter().map(|v| v.abs()).sum::<f64>();
    }
    Ok(f)
}

/// The regularizer recorded on `g` with fixed coefficients (from [`gamma_coefficients`]).
pub fn regularizer_var(
    g: &mut Graph,
    binder: &mut ParamBinder,
    model: &ModelGraph,
    coef: &BTreeMap<usize, f64>,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(coef.len());
    for (&bn, &c) in coef {
        let gv = binder.bind_name(g, &model.params, &gamma_name(&model.layers[bn].name))?;
        terms.push(g.abs_sum_scaled(gv, c));
    }
    if terms.is_empty() {
        return Ok(g.constant(crate::tensor::Tensor::scalar(0.0)));
    }
    g.add_scalars(&terms)
}
