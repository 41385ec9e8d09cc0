//! Batchnorm folding into the preceding convolution.

use std::collections::BTreeMap;

use super::{beta_name, gamma_name, mean_name, var_name, Layer, ModelGraph, Source};
use crate::autograd::BN_EPS;
use crate::error::Result;
use crate::tensor::Tensor;

/// Per-channel multiplier `gamma / sqrt(var + eps)` applied to folded weights.
/// The in-graph fold uses the same expression so both paths agree bit for bit.
pub fn bn_fold_scale(gamma: &[f64], var: &[f64]) -> Vec<f64> {
    gamma.iter().zip(var).map(|(g, v)| g / (v + BN_EPS).sqrt()).collect()
}

/// Absorb every batchnorm that directly follows a conv into that conv's
/// weights and bias, using the running statistics. Convs without a
/// batchnorm successor are left as they are, so folding is idempotent.
pub fn fold_bn(model: &ModelGraph) -> Result<ModelGraph> {
    let mut out = model.clone();
    let mut removed = BTreeMap::new();
    for ci in model.conv_indices() {
        let bi = ci + 1;
        if bi >= model.layers.len()
            || model.bn_after(ci) != Some(bi)
            || model.sources(bi) != [Source::Layer(ci)]
        {
            continue;
        }
        let conv = &model.layers[ci];
        let bn = &model.layers[bi].name;
        let spec = model.conv_spec(ci)?;
        let g = model.params.tensor(&gamma_name(bn))?.data().to_vec();
        let b = model.params.tensor(&beta_name(bn))?.data().to_vec();
        let mu = model.params.tensor(&mean_name(bn))?.data().to_vec();
        let var = model.params.tensor(&var_name(bn))?.data().to_vec();
        let old_bias = match model.params.tensor(&conv.bias_name()) {
            Ok(t) => t.data().to_vec(),
            Err(_) => vec![0.0; spec.out_channels],
        };
        let mut w = model.params.tensor(&conv.weight_name())?.clone();
        let per = w.numel() / spec.out_channels;
        let scale = bn_fold_scale(&g, &var);
        let mut bias = vec![0.0; spec.out_channels];
        for o in 0..spec.out_channels {
            for v in &mut w.data_mut()[o * per..(o + 1) * per] {
                *v *= scale[o];
            }
            bias[o] = b[o] + (old_bias[o] - mu[o]) * scale[o];
        }
        let trainable = model.params.by_name(&conv.weight_name())?.trainable;
        out.params.set_tensor(&conv.weight_name(), w)?;
        out.params.insert(conv.bias_name(), Tensor::from_vec(bias), trainable);
        removed.insert(bi, ci);
    }
    if removed.is_empty() {
        return Ok(out);
    }
    let mut params = crate::autograd::ParamStore::new();
    let dropped: Vec<String> = removed
        .keys()
        .flat_map(|&bi| {
            let n = &model.layers[bi].name;
            [gamma_name(n), beta_name(n), mean_name(n), var_name(n)]
        })
        .collect();
    for p in out.params.iter() {
        if !dropped.contains(&p.name) {
            params.insert(p.name.clone(), p.tensor.clone(), p.trainable);
        }
    }
    out.params = params;
    out.layers = remove_layers(model, &removed);
    out.validate()?;
    Ok(out)
}

/// Drop the layers in `removed` (keyed by index, valued by the old index of
/// the layer that takes over their consumers) and renumber edges.
pub(crate) fn remove_layers(model: &ModelGraph, removed: &BTreeMap<usize, usize>) -> Vec<Layer> {
    let resolve = |mut i: usize| {
        while let Some(&r) = removed.get(&i) {
            i = r;
        }
        i
    };
    let mut new_index = vec![usize::MAX; model.layers.len()];
    let mut next = 0;
    for i in 0..model.layers.len() {
        if !removed.contains_key(&i) {
            new_index[i] = next;
            next += 1;
        }
    }
    let mut layers = Vec::with_capacity(next);
    for (i, l) in model.layers.iter().enumerate() {
        if removed.contains_key(&i) {
            continue;
        }
        let ni = new_index[i];
        let srcs: Vec<Option<usize>> = model
            .sources(i)
            .into_iter()
            .map(|s| match s {
                Source::Input => None,
                Source::Layer(j) => Some(new_index[resolve(j)]),
            })
            .collect();
        let implicit = match srcs[..] {
            [None] => ni == 0,
            [Some(j)] => j + 1 == ni,
            _ => false,
        };
        let mut nl = l.clone();
        nl.inputs = if implicit {
            Vec::new()
        } else {
            srcs.into_iter().map(|s| s.expect("only the first layer reads the input")).collect()
        };
        layers.push(nl);
    }
    layers
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Graph, ParamBinder};
    use crate::model::LayerKind;
    use crate::model::{builders, forward, resnet, ForwardOptions};
    use crate::rng;
    use rand::Rng as _;

    fn set_bn(m: &mut ModelGraph, bn: &str, g: f64, b: f64, mu: f64, var: f64) {
        let c = m.params.tensor(&gamma_name(bn)).unwrap().numel();
        m.params.set_tensor(&gamma_name(bn), Tensor::full(&[c], g)).unwrap();
        m.params.set_tensor(&beta_name(bn), Tensor::full(&[c], b)).unwrap();
        m.params.set_tensor(&mean_name(bn), Tensor::full(&[c], mu)).unwrap();
        m.params.set_tensor(&var_name(bn), Tensor::full(&[c], var)).unwrap();
    }

    #[test]
    fn identity_bn_folds_to_same_weights() {
        let mut m = builders::tests::single_conv(3, 4, 3, 4);
        set_bn(&mut m, "c_bn", 1.0, 0.0, 0.0, 1.0 - BN_EPS);
        let f = fold_bn(&m).unwrap();
        let w0 = m.params.tensor("c.weight").unwrap();
        let w1 = f.params.tensor("c.weight").unwrap();
        assert!(w0.max_abs_diff(w1) < 1e-12);
        assert!(f.params.tensor("c.bias").unwrap().data().iter().all(|v| v.abs() < 1e-12));
        assert!(!f.has_bn());
    }

    #[test]
    fn scale_shift_bn() {
        let mut m = builders::tests::single_conv(3, 4, 3, 4);
        set_bn(&mut m, "c_bn", 2.0, 1.0, 0.0, 1.0 - BN_EPS);
        let f = fold_bn(&m).unwrap();
        let w0 = m.params.tensor("c.weight").unwrap().map(|v| 2.0 * v);
        assert!(w0.max_abs_diff(f.params.tensor("c.weight").unwrap()) < 1e-12);
        assert!(f.params.tensor("c.bias").unwrap().data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    fn randomize_bns(m: &mut ModelGraph, seed: u64) {
        let mut r = rng(seed);
        let bns: Vec<String> = m
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::BatchNorm { .. }))
            .map(|l| l.name.clone())
            .collect();
        for bn in bns {
            let c = m.params.tensor(&gamma_name(&bn)).unwrap().numel();
            let mut rv = |lo: f64, hi: f64| Tensor::new(vec![c], (0..c).map(|_| r.random_range(lo..hi)).collect()).unwrap();
            let (g, b, mu, v) = (rv(0.5, 1.5), rv(-0.5, 0.5), rv(-0.3, 0.3), rv(0.5, 2.0));
            m.params.set_tensor(&gamma_name(&bn), g).unwrap();
            m.params.set_tensor(&beta_name(&bn), b).unwrap();
            m.params.set_tensor(&mean_name(&bn), mu).unwrap();
            m.params.set_tensor(&var_name(&bn), v).unwrap();
        }
    }

    fn infer(m: &ModelGraph, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = forward(&mut g, m, &mut ParamBinder::frozen(), xv, &ForwardOptions::default()).unwrap();
        g.value(out.logits).clone()
    }

    #[test]
    fn folded_forward_matches() {
        for (seed, mut m) in [
            (1, crate::model::toy_cnn(3, 8, 3, &mut rng(1)).unwrap()),
            (2, resnet("r", &[4, 6], &[1, 1], 3, 8, 3, &mut rng(2)).unwrap()),
        ] {
            randomize_bns(&mut m, seed);
            let f = fold_bn(&m).unwrap();
            assert!(!f.has_bn());
            let mut r = rng(seed + 10);
            for _ in 0..10 {
                let x = Tensor::new(vec![1, 3, 8, 8], (0..192).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
                let (a, b) = (infer(&m, &x), infer(&f, &x));
                for (u, v) in a.data().iter().zip(b.data()) {
                    assert!((u - v).abs() <= 1e-9 * u.abs().max(1.0), "{u} vs {v}");
                }
            }
            // idempotent
            assert_eq!(fold_bn(&f).unwrap(), f);
        }
    }
}
