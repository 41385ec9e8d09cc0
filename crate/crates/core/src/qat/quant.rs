//! Uniform quantizers with learned step size and their straight-through gradients.

use crate::autograd::{Graph, Var};
use crate::config::ClipBounds;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative distance from a `.5` tie below which a value counts as the tie.
/// Decimal steps put exact ties one ulp off (`-0.35 / 0.1 = -3.4999999999999996`).
const TIE_TOLERANCE: f64 = 1e-9;

/// Round half away from zero, treating values within [`TIE_TOLERANCE`] of a
/// tie as the tie. Every quantizer in training and simulation uses this.
#[inline]
pub fn round_half_away(v: f64) -> f64 {
    let a = v.abs();
    let frac = a - a.floor();
    if (frac - 0.5).abs() <= TIE_TOLERANCE * a.max(1.0) {
        (a.floor() + 1.0).copysign(v)
    } else {
        v.round()
    }
}

/// `round(clip(v / step, -q_n, q_p))`, rounding half away from zero.
#[inline]
pub fn quantize_value(v: f64, step: f64, bounds: ClipBounds) -> f64 {
    round_half_away((v / step).clamp(bounds.lo(), bounds.hi()))
}

pub(crate) fn check_step(step: f64) -> Result<()> {
    if step > 0.0 && step.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "quantizer step must be positive and finite, got {step}"
        )))
    }
}

/// Integer codes and their dequantized values `codes * step`.
pub fn quantize_weights(w: &Tensor, step: f64, bounds: ClipBounds) -> Result<(Tensor, Tensor)> {
    check_step(step)?;
    let q = w.map(|v| quantize_value(v, step, bounds));
    let deq = q.map(|v| v * step);
    Ok((q, deq))
}

/// Derivative of the dequantized value with respect to the step, per element.
#[inline]
fn step_slope(v: f64, bounds: ClipBounds) -> f64 {
    if v < bounds.lo() {
        bounds.lo()
    } else if v > bounds.hi() {
        bounds.hi()
    } else {
        round_half_away(v) - v
    }
}

/// Default gradient scale `1 / sqrt(n * q_p)` for the step of a quantizer over `n` elements.
pub fn grad_scale(n: usize, bounds: ClipBounds) -> f64 {
    1.0 / ((n.max(1) as f64) * bounds.hi().max(1.0)).sqrt()
}

/// Straight-through input gradient and scaled step gradient of [`quantize_weights`].
pub fn weight_quant_backward(
    grad_out: &Tensor,
    w: &Tensor,
    step: f64,
    bounds: ClipBounds,
) -> Result<(Tensor, f64)> {
    check_step(step)?;
    if grad_out.shape() != w.shape() {
        return Err(Error::shape(
            "weight_quant_backward",
            format!("grad {:?} vs weight {:?}", grad_out.shape(), w.shape()),
        ));
    }
    let (gx, gs) = lsq_backward(grad_out.data(), w.data(), step, bounds, grad_scale(w.numel(), bounds));
    Ok((Tensor::new(w.shape().to_vec(), gx)?, gs))
}

fn lsq_backward(g: &[f64], x: &[f64], step: f64, bounds: ClipBounds, gscale: f64) -> (Vec<f64>, f64) {
    let mut gx = Vec::with_capacity(x.len());
    let mut gs = 0.0;
    for (&gv, &xv) in g.iter().zip(x) {
        let v = xv / step;
        gx.push(if bounds.contains(v) { gv } else { 0.0 });
        gs += gv * step_slope(v, bounds);
    }
    (gx, gs * gscale)
}

impl Graph {
    /// Fake quantization `round(clip(x / s)) * s` with a learnable step `s`
    /// (a one-element var). Gradients: straight-through for `x` inside the
    /// clip range, zero outside; the step gradient is scaled by `gscale`.
    pub fn lsq_quantize(&mut self, x: Var, step: Var, bounds: ClipBounds, gscale: f64) -> Result<Var> {
        let s = self.value(step).item();
        check_step(s)?;
        let out = self.value(x).map(|v| quantize_value(v, s, bounds) * s);
        Ok(self.custom(
            &[x, step],
            out,
            Box::new(move |g, inputs, needs| {
                let s = inputs[1].item();
                let (gx, gs) = lsq_backward(g.data(), inputs[0].data(), s, bounds, gscale);
                Ok(vec![
                    needs[0].then(|| Tensor::new(inputs[0].shape().to_vec(), gx)).transpose()?,
                    needs[1].then(|| Tensor::scalar(gs)),
                ])
            }),
        ))
    }

    /// Conv weight and bias with a following batchnorm absorbed, using fixed
    /// running statistics; `gamma`, `beta`, `w` and the optional conv bias
    /// stay differentiable.
    pub fn fold_conv_bn(
        &mut self,
        w: Var,
        bias: Option<Var>,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Result<(Var, Var)> {
        let wt = self.value(w);
        let o = *wt.shape().first().unwrap_or(&0);
        let gm = self.value(gamma).data().to_vec();
        if gm.len() != o || mean.len() != o || var.len() != o || self.value(beta).numel() != o {
            return Err(Error::shape("fold_conv_bn", format!("batchnorm size vs {o} filters")));
        }
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + crate::autograd::BN_EPS).sqrt()).collect();
        let scale = crate::model::bn_fold_scale(&gm, var);
        let per = wt.numel() / o.max(1);
        let mut wf = wt.clone();
        for (c, chunk) in wf.data_mut().chunks_mut(per).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= scale[c]);
        }
        let old_bias = match bias {
            Some(b) => self.value(b).data().to_vec(),
            None => vec![0.0; o],
        };
        let bt = self.value(beta).data().to_vec();
        let bf: Vec<f64> = (0..o).map(|c| bt[c] + (old_bias[c] - mean[c]) * scale[c]).collect();

        let (sc, iv) = (scale.clone(), inv.clone());
        let wshape = wt.shape().to_vec();
        let wv = self.custom(
            &[w, gamma],
            wf,
            Box::new(move |g, inputs, needs| {
                let dw = needs[0].then(|| {
                    let mut d = g.clone();
                    for (c, chunk) in d.data_mut().chunks_mut(per).enumerate() {
                        chunk.iter_mut().for_each(|v| *v *= sc[c]);
                    }
                    d
                });
                let dg = needs[1].then(|| {
                    let wd = inputs[0].data();
                    Tensor::from_vec(
                        (0..o)
                            .map(|c| {
                                let r = c * per..(c + 1) * per;
                                crate::autograd::kernels::dot(&g.data()[r.clone()], &wd[r]) * iv[c]
                            })
                            .collect(),
                    )
                });
                debug_assert_eq!(inputs[0].shape(), &wshape[..]);
                Ok(vec![dw, dg])
            }),
        );
        let mu = mean.to_vec();
        let mut ins = vec![beta, gamma];
        ins.extend(bias);
        let bv = self.custom(
            &ins,
            Tensor::from_vec(bf),
            Box::new(move |g, inputs, needs| {
                let gd = g.data();
                let ob: Vec<f64> = match inputs.get(2) {
                    Some(t) => t.data().to_vec(),
                    None => vec![0.0; o],
                };
                let mut res = vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| Tensor::from_vec((0..o).map(|c| gd[c] * (ob[c] - mu[c]) * inv[c]).collect())),
                ];
                if needs.len() == 3 {
                    res.push(needs[2].then(|| Tensor::from_vec((0..o).map(|c| gd[c] * scale[c]).collect())));
                }
                Ok(res)
            }),
        );
        Ok((wv, bv))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::clip_bounds;

    fn b4() -> ClipBounds {
        clip_bounds(4).unwrap()
    }

    #[test]
    fn weight_examples() {
        let (q, d) = quantize_weights(&Tensor::from_vec(vec![0.0, 1.0, -0.35]), 0.1, b4()).unwrap();
        assert_eq!(q.data(), &[0.0, 7.0, -4.0]);
        assert_eq!(d.data()[0], 0.0);
        assert!((d.data()[1] - 0.7).abs() < 1e-12);
        assert!((d.data()[2] + 0.4).abs() < 1e-12);
    }

    #[test]
    fn ties_round_away() {
        assert_eq!(round_half_away(2.5), 3.0);
        assert_eq!(round_half_away(-2.5), -3.0);
        assert_eq!(round_half_away(-0.35 / 0.1), -4.0);
        assert_eq!(round_half_away(2.49), 2.0);
        assert_eq!(round_half_away(-0.2), -0.0);
        assert_eq!(round_half_away(0.0), 0.0);
    }

    #[test]
    fn non_positive_step_rejected() {
        let w = Tensor::from_vec(vec![1.0]);
        assert!(quantize_weights(&w, 0.0, b4()).is_err());
        assert!(quantize_weights(&w, -1.0, b4()).is_err());
    }

    #[test]
    fn backward_examples() {
        let one = Tensor::from_vec(vec![1.0]);
        let (gw, _) = weight_quant_backward(&one, &Tensor::from_vec(vec![1.0]), 0.1, b4()).unwrap();
        assert_eq!(gw.data(), &[0.0]);
        let (gw, _) = weight_quant_backward(&one, &Tensor::from_vec(vec![0.05]), 0.1, b4()).unwrap();
        assert_eq!(gw.data(), &[1.0]);
        let (_, gs) = weight_quant_backward(&one, &Tensor::from_vec(vec![0.25]), 0.1, b4()).unwrap();
        let g = 1.0 / (1.0f64 * 7.0).sqrt();
        assert!((gs - 0.5 * g).abs() < 1e-12, "{gs}");
    }

    #[test]
    fn clipped_step_slopes() {
        let one = Tensor::from_vec(vec![1.0, 1.0]);
        let (_, gs) = weight_quant_backward(&one, &Tensor::from_vec(vec![5.0, -5.0]), 0.1, b4()).unwrap();
        // 7 + (-7), scaled
        assert!(gs.abs() < 1e-12);
        let (_, gs) = weight_quant_backward(&Tensor::from_vec(vec![1.0]), &Tensor::from_vec(vec![5.0]), 0.1, b4()).unwrap();
        assert!((gs - 7.0 / 7f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn graph_op_matches_pure_functions() {
        let w = Tensor::from_vec(vec![0.25, -0.9, 0.03, 0.61]);
        let mut g = Graph::new();
        let wv = g.variable(w.clone());
        let sv = g.variable(Tensor::scalar(0.1));
        let q = g.lsq_quantize(wv, sv, b4(), grad_scale(4, b4())).unwrap();
        let (_, deq) = quantize_weights(&w, 0.1, b4()).unwrap();
        assert_eq!(g.value(q), &deq);
        let loss = g.abs_sum_scaled(q, 1.0);
        let sign = deq.map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
        let grads = g.gradients(loss).unwrap();
        let (gw, gs) = weight_quant_backward(&sign, &w, 0.1, b4()).unwrap();
        assert_eq!(grads.get(wv).unwrap(), &gw);
        assert!((grads.get(sv).unwrap().item() - gs).abs() < 1e-12);
    }
}
