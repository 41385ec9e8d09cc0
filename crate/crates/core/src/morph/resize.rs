//! Channel-space surgery: keep a subset of channels or append fresh ones.

use std::collections::BTreeMap;

use log::warn;

use super::regularizer::space_mask;
use crate::error::{Error, Result};
use crate::model::{
    beta_name, gamma_name, kaiming_normal, mean_name, var_name, ChannelSpaces, LayerKind, ModelGraph, SpaceId,
};
use crate::tensor::Tensor;
use crate::Rng;

fn set_param<F>(model: &mut ModelGraph, name: &str, f: F) -> Result<()>
where
    F: FnOnce(&Tensor) -> Result<Tensor>,
{
    if !model.params.contains(name) {
        return Ok(());
    }
    let t = f(model.params.tensor(name)?)?;
    model.params.set_tensor(name, t)
}

const BN_FIELDS: [fn(&str) -> String; 4] = [gamma_name, beta_name, mean_name, var_name];

/// Apply `f` to the linear weight viewed as `[out, channels, hw]` along axis 1.
fn reshape_linear<F>(w: &Tensor, channels: usize, f: F) -> Result<Tensor>
where
    F: FnOnce(&Tensor) -> Result<Tensor>,
{
    let (out, inf) = (w.shape()[0], w.shape()[1]);
    if channels == 0 || inf % channels != 0 {
        return Err(Error::InvalidModel(format!(
            "linear input {inf} is not a multiple of {channels} channels"
        )));
    }
    let t = f(&w.clone().reshape(&[out, channels, inf / channels])?)?;
    let c = t.shape()[1];
    t.reshape(&[out, c * (inf / channels)])
}

/// Keep only `keep[s]` (sorted channel indices) in each listed space.
pub fn select_channels(model: &ModelGraph, keep: &BTreeMap<SpaceId, Vec<usize>>) -> Result<ModelGraph> {
    let spaces = model.spaces()?;
    let mut m = model.clone();
    for (&s, idx) in keep {
        let sp = spaces.get(s);
        if sp.is_input {
            return Err(Error::InvalidArgument("input channels cannot be resized".into()));
        }
        if idx.is_empty() {
            return Err(Error::InvalidArgument(format!("space {s} would lose every channel")));
        }
        for &p in &sp.producers {
            let name = m.layers[p].name.clone();
            let w = m.layers[p].weight_name();
            set_param(&mut m, &w, |t| t.select(0, idx))?;
            set_param(&mut m, &format!("{name}.bias"), |t| t.select(0, idx))?;
            if let LayerKind::Conv(c) = &mut m.layers[p].kind {
                c.out_channels = idx.len();
            }
        }
        for &b in &sp.batchnorms {
            let name = m.layers[b].name.clone();
            for f in BN_FIELDS {
                set_param(&mut m, &f(&name), |t| t.select(0, idx))?;
            }
            m.layers[b].kind = LayerKind::BatchNorm { channels: idx.len() };
        }
        for &c in &sp.conv_consumers {
            let w = m.layers[c].weight_name();
            set_param(&mut m, &w, |t| t.select(1, idx))?;
            if let LayerKind::Conv(spec) = &mut m.layers[c].kind {
                spec.in_channels = idx.len();
            }
        }
        for &l in &sp.linear_consumers {
            let w = m.layers[l].weight_name();
            set_param(&mut m, &w, |t| reshape_linear(t, sp.channels, |v| v.select(1, idx)))?;
            if let LayerKind::Linear { in_features, .. } = &mut m.layers[l].kind {
                *in_features = *in_features / sp.channels * idx.len();
            }
        }
    }
    m.validate()?;
    Ok(m)
}

/// Grow spaces to the given widths. New filters are He-initialized over
/// their full fan-in; weights reading a new channel start at zero so the
/// function computed by the existing channels is unchanged. New batchnorms
/// are identities.
pub fn grow_channels(model: &ModelGraph, widths: &BTreeMap<SpaceId, usize>, rng: &mut Rng) -> Result<ModelGraph> {
    let spaces = model.spaces()?;
    for (&s, &w) in widths {
        let sp = spaces.get(s);
        if sp.is_input && w != sp.channels {
            return Err(Error::InvalidArgument("input channels cannot be resized".into()));
        }
        if w < sp.channels {
            return Err(Error::InvalidArgument(format!(
                "cannot grow space {s} from {} to {w}",
                sp.channels
            )));
        }
    }
    let width = |s: SpaceId| widths.get(&s).copied().unwrap_or(spaces.get(s).channels);
    let mut m = model.clone();
    // layer order keeps the rng stream independent of space numbering
    for i in 0..m.layers.len() {
        match m.layers[i].kind.clone() {
            LayerKind::Conv(mut spec) => {
                let cin = width(spaces.source_space(model, i).expect("conv input"));
                let cout = width(spaces.of_layer(i).expect("conv output"));
                let k = spec.kernel_size;
                let wname = m.layers[i].weight_name();
                let old = m.params.tensor(&wname)?.extend_axis(1, cin, || 0.0);
                let fresh = kaiming_normal(&[cout - spec.out_channels, cin, k, k], cin * k * k, 2.0, rng);
                let mut it = fresh.data().iter();
                let grown = old.extend_axis(0, cout, || *it.next().expect("sized"));
                m.params.set_tensor(&wname, grown)?;
                let bname = m.layers[i].bias_name();
                set_param(&mut m, &bname, |t| Ok(t.extend_axis(0, cout, || 0.0)))?;
                spec.in_channels = cin;
                spec.out_channels = cout;
                m.layers[i].kind = LayerKind::Conv(spec);
            }
            LayerKind::BatchNorm { .. } => {
                let c = width(spaces.of_layer(i).expect("bn space"));
                let name = m.layers[i].name.clone();
                for (f, v) in BN_FIELDS.iter().zip([1.0, 0.0, 0.0, 1.0]) {
                    set_param(&mut m, &f(&name), |t| Ok(t.extend_axis(0, c, || v)))?;
                }
                m.layers[i].kind = LayerKind::BatchNorm { channels: c };
            }
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                let s = spaces.source_space(model, i).expect("linear input");
                let (old_c, new_c) = (spaces.get(s).channels, width(s));
                let wname = m.layers[i].weight_name();
                set_param(&mut m, &wname, |t| {
                    reshape_linear(t, old_c, |v| Ok(v.extend_axis(1, new_c, || 0.0)))
                })?;
                m.layers[i].kind = LayerKind::Linear {
                    in_features: in_features / old_c * new_c,
                    out_features,
                };
            }
            _ => {}
        }
    }
    m.validate()?;
    Ok(m)
}

/// Union keep-mask of every resizable space, as 0/1 masks keyed by batchnorm.
pub fn batchnorm_masks(model: &ModelGraph, tau: f64) -> Result<BTreeMap<usize, Vec<f64>>> {
    let spaces = model.spaces()?;
    let mut out = BTreeMap::new();
    for (s, sp) in spaces.spaces.iter().enumerate() {
        if sp.is_input {
            continue;
        }
        let keep = keep_indices(model, &spaces, s, tau)?.0;
        let mut mask = vec![0.0; sp.channels];
        for k in keep {
            mask[k] = 1.0;
        }
        for &b in &sp.batchnorms {
            out.insert(b, mask.clone());
        }
    }
    Ok(out)
}

/// Largest |γ| of each channel over the space's batchnorms.
pub(crate) fn space_magnitudes(model: &ModelGraph, bns: &[usize], channels: usize) -> Result<Vec<f64>> {
    let mut mag = vec![0.0f64; channels];
    for &b in bns {
        let g = model.params.tensor(&gamma_name(&model.layers[b].name))?;
        for (m, v) in mag.iter_mut().zip(g.data()) {
            *m = m.max(v.abs());
        }
    }
    Ok(mag)
}

/// Surviving channels of a space and whether the single-channel fallback fired.
fn keep_indices(model: &ModelGraph, spaces: &ChannelSpaces, s: SpaceId, tau: f64) -> Result<(Vec<usize>, bool)> {
    let sp = spaces.get(s);
    let mask = space_mask(model, &sp.batchnorms, sp.channels, tau)?;
    let keep: Vec<usize> = (0..sp.channels).filter(|&c| mask[c]).collect();
    if !keep.is_empty() {
        return Ok((keep, false));
    }
    let mag = space_magnitudes(model, &sp.batchnorms, sp.channels)?;
    let best = (0..sp.channels).fold(0, |b, c| if mag[c] > mag[b] { c } else { b });
    Ok((vec![best], true))
}

/// Remove every channel whose |γ| ≤ τ in all batchnorms of its space.
/// Returns the pruned model and any warnings raised.
pub fn prune_zero_gamma(model: &ModelGraph, tau: f64) -> Result<(ModelGraph, Vec<String>)> {
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("prune threshold must be positive, got {tau}")));
    }
    let spaces = model.spaces()?;
    let mut keep = BTreeMap::new();
    let mut warnings = Vec::new();
    for (s, sp) in spaces.spaces.iter().enumerate() {
        if sp.is_input {
            continue;
        }
        if sp.batchnorms.is_empty() {
            let conv = sp.producers.first().map(|&p| model.layers[p].name.clone()).unwrap_or_default();
            return Err(Error::MissingBatchNorm(conv));
        }
        let (k, fallback) = keep_indices(model, &spaces, s, tau)?;
        if fallback {
            let names: Vec<&str> = sp.producers.iter().map(|&p| model.layers[p].name.as_str()).collect();
            let msg = format!(
                "all channels of {} are below the prune threshold; keeping channel {}",
                names.join("/"),
                k[0]
            );
            warn!("{msg}");
            warnings.push(msg);
        }
        if k.len() < sp.channels {
            keep.insert(s, k);
        }
    }
    if keep.is_empty() {
        return Ok((model.clone(), warnings));
    }
    Ok((select_channels(model, &keep)?, warnings))
}

/// Keep the `width` largest-|γ| channels of each listed space (original order preserved).
pub fn keep_top_gamma(model: &ModelGraph, widths: &BTreeMap<SpaceId, usize>) -> Result<ModelGraph> {
    let spaces = model.spaces()?;
    let mut keep = BTreeMap::new();
    for (&s, &w) in widths {
        let sp = spaces.get(s);
        if w >= sp.channels {
            continue;
        }
        let mag = space_magnitudes(model, &sp.batchnorms, sp.channels)?;
        let mut order: Vec<usize> = (0..sp.channels).collect();
        // stable: ties keep the lower index
        order.sort_by(|&a, &b| mag[b].total_cmp(&mag[a]));
        let mut k: Vec<usize> = order[..w.max(1)].to_vec();
        k.sort_unstable();
        keep.insert(s, k);
    }
    if keep.is_empty() {
        return Ok(model.clone());
    }
    select_channels(model, &keep)
}
