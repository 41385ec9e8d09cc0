//! Differentiable CNN primitives.

use super::graph::{Graph, Var};
use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batchnorm epsilon used throughout.
pub const BN_EPS: f64 = 1e-5;

/// Per-channel statistics from a training-mode batchnorm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased batch variance.
    pub var: Vec<f64>,
    /// Elements per channel the statistics were computed from.
    pub count: usize,
}

fn channel_layout(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => Err(Error::shape(op, format!("expected [N, C] or NCHW, got {shape:?}"))),
    }
}

impl Graph {
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.value(x);
        let ws = self.value(w);
        let geom = ConvGeom::new(xs.shape(), ws.shape(), stride, padding)?;
        let out = kernels::conv2d_forward(xs.data(), ws.data(), &geom);
        let value = Tensor::new(geom.out_shape(), out)?;
        let xshape = xs.shape().to_vec();
        let wshape = ws.shape().to_vec();
        Ok(self.custom(
            &[x, w],
            value,
            Box::new(move |g, inputs, needs| {
                let (dx, dw) = kernels::conv2d_backward(
                    inputs[0].data(),
                    inputs[1].data(),
                    g.data(),
                    &geom,
                    needs[0],
                    needs[1],
                );
                Ok(vec![
                    dx.map(|d| Tensor::new(xshape.clone(), d)).transpose()?,
                    dw.map(|d| Tensor::new(wshape.clone(), d)).transpose()?,
                ])
            }),
        ))
    }

    /// `x + b[c]` broadcast over batch and spatial axes.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.value(x);
        let (n, c, hw) = channel_layout(xs.shape(), "add_channel_bias")?;
        let bs = self.value(b);
        if bs.numel() != c {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias {:?} for {c} channels", bs.shape()),
            ));
        }
        let mut out = xs.clone();
        let bd = bs.data().to_vec();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bd[(i / hw) % c];
        }
        let bshape = bs.shape().to_vec();
        Ok(self.custom(
            &[x, b],
            out,
            Box::new(move |g, _inputs, needs| {
                let gb = needs[1].then(|| {
                    let mut s = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            s[ch] += g.data()[base..base + hw].iter().sum::<f64>();
                        }
                    }
                    Tensor::new(bshape.clone(), s)
                });
                Ok(vec![needs[0].then(|| g.clone()), gb.transpose()?])
            }),
        ))
    }

    /// Batchnorm over batch statistics. Returns the output and the statistics
    /// used, for the caller's running-average update.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let xs = self.value(x);
        let (n, c, hw) = channel_layout(xs.shape(), "batchnorm")?;
        let gs = self.value(gamma).data().to_vec();
        let bs = self.value(beta).data().to_vec();
        if gs.len() != c || bs.len() != c {
            return Err(Error::shape(
                "batchnorm",
                format!("gamma/beta of len {}/{} for {c} channels", gs.len(), bs.len()),
            ));
        }
        let m = (n * hw) as f64;
        let xd = xs.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                s += xd[base..base + hw].iter().sum::<f64>();
            }
            mean[ch] = s / m;
            let mut v = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                v += xd[base..base + hw].iter().map(|x| (x - mean[ch]).powi(2)).sum::<f64>();
            }
            var[ch] = v / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for (i, &xv) in xd.iter().enumerate() {
            let ch = (i / hw) % c;
            xhat[i] = (xv - mean[ch]) * inv_std[ch];
            out[i] = gs[ch] * xhat[i] + bs[ch];
        }
        let value = Tensor::new(xs.shape().to_vec(), out)?;
        let xshape = xs.shape().to_vec();
        let stats = BatchStats {
            mean,
            var,
            count: n * hw,
        };
        let v = self.custom(
            &[x, gamma, beta],
            value,
            Box::new(move |g, inputs, needs| {
                let gd = g.data();
                let gamma = inputs[1].data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, &gv) in gd.iter().enumerate() {
                    let ch = (i / hw) % c;
                    sum_g[ch] += gv;
                    sum_gx[ch] += gv * xhat[i];
                }
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; gd.len()];
                    for (i, &gv) in gd.iter().enumerate() {
                        let ch = (i / hw) % c;
                        dx[i] = gamma[ch] * inv_std[ch] / m
                            * (m * gv - sum_g[ch] - xhat[i] * sum_gx[ch]);
                    }
                    Tensor::new(xshape.clone(), dx)
                });
                Ok(vec![
                    dx.transpose()?,
                    needs[1].then(|| Tensor::from_vec(sum_gx.clone())),
                    needs[2].then(|| Tensor::from_vec(sum_g.clone())),
                ])
            }),
        );
        Ok((v, stats))
    }

    /// Batchnorm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let xs = self.value(x);
        let (_, c, hw) = channel_layout(xs.shape(), "batchnorm")?;
        let gs = self.value(gamma).data().to_vec();
        let bs = self.value(beta).data().to_vec();
        if gs.len() != c || bs.len() != c || mean.len() != c || var.len() != c {
            return Err(Error::shape(
                "batchnorm",
                format!("parameter lengths do not match {c} channels"),
            ));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let xd = xs.data();
        let mut out = vec![0.0; xd.len()];
        for (i, &xv) in xd.iter().enumerate() {
            let ch = (i / hw) % c;
            out[i] = gs[ch] * (xv - mean[ch]) * inv_std[ch] + bs[ch];
        }
        let value = Tensor::new(xs.shape().to_vec(), out)?;
        let xshape = xs.shape().to_vec();
        Ok(self.custom(
            &[x, gamma, beta],
            value,
            Box::new(move |g, inputs, needs| {
                let gd = g.data();
                let xd = inputs[0].data();
                let gamma = inputs[1].data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; if needs[0] { gd.len() } else { 0 }];
                for (i, &gv) in gd.iter().enumerate() {
                    let ch = (i / hw) % c;
                    dgamma[ch] += gv * (xd[i] - mean[ch]) * inv_std[ch];
                    dbeta[ch] += gv;
                    if needs[0] {
                        dx[i] = gv * gamma[ch] * inv_std[ch];
                    }
                }
                Ok(vec![
                    needs[0].then(|| Tensor::new(xshape.clone(), dx)).transpose()?,
                    needs[1].then(|| Tensor::from_vec(dgamma)),
                    needs[2].then(|| Tensor::from_vec(dbeta)),
                ])
            }),
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.custom(
            &[x],
            value,
            Box::new(|g, inputs, _| {
                let mut d = g.clone();
                for (gv, &xv) in d.data_mut().iter_mut().zip(inputs[0].data()) {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                Ok(vec![Some(d)])
            }),
        )
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xs = self.value(x);
        let dims = xs.dims4("maxpool2d")?;
        if kernel == 0 || stride == 0 || dims.2 < kernel || dims.3 < kernel {
            return Err(Error::shape(
                "maxpool2d",
                format!("kernel {kernel} stride {stride} on {:?}", xs.shape()),
            ));
        }
        let (out, arg, oh, ow) = kernels::maxpool_forward(xs.data(), dims, kernel, stride);
        let value = Tensor::new(vec![dims.0, dims.1, oh, ow], out)?;
        let xshape = xs.shape().to_vec();
        Ok(self.custom(
            &[x],
            value,
            Box::new(move |g, _, _| {
                let mut d = Tensor::zeros(&xshape);
                for (&i, &gv) in arg.iter().zip(g.data()) {
                    d.data_mut()[i] += gv;
                }
                Ok(vec![Some(d)])
            }),
        ))
    }

    /// Global average pooling to `[N, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        let (n, c, h, w) = xs.dims4("avgpool")?;
        let hw = h * w;
        let out: Vec<f64> = xs
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(vec![n, c, 1, 1], out)?;
        let xshape = xs.shape().to_vec();
        Ok(self.custom(
            &[x],
            value,
            Box::new(move |g, _, _| {
                let mut d = Vec::with_capacity(n * c * hw);
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv / hw as f64, hw));
                }
                Ok(vec![Some(Tensor::new(xshape.clone(), d)?)])
            }),
        ))
    }

    /// `y = x W^T + b` with `W: [out, in]`. NCHW inputs are flattened per sample.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x);
        let n = *xs.shape().first().ok_or_else(|| Error::shape("linear", "scalar input"))?;
        let fin = xs.numel() / n.max(1);
        let ws = self.value(w);
        let (fout, wi) = match ws.shape() {
            [o, i] => (*o, *i),
            s => return Err(Error::shape("linear", format!("weight must be 2-D, got {s:?}"))),
        };
        if wi != fin {
            return Err(Error::shape(
                "linear",
                format!("input {:?} has {fin} features, weight expects {wi}", xs.shape()),
            ));
        }
        let xd = xs.data();
        let wd = ws.data();
        let mut out = vec![0.0; n * fout];
        for s in 0..n {
            let xrow = &xd[s * fin..(s + 1) * fin];
            for o in 0..fout {
                out[s * fout + o] = kernels::dot(&wd[o * fin..(o + 1) * fin], xrow);
            }
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            if bd.len() != fout {
                return Err(Error::shape("linear", format!("bias len {} for {fout} outputs", bd.len())));
            }
            for s in 0..n {
                for o in 0..fout {
                    out[s * fout + o] += bd[o];
                }
            }
        }
        let value = Tensor::new(vec![n, fout], out)?;
        let xshape = xs.shape().to_vec();
        let inputs: Vec<Var> = std::iter::once(x).chain(std::iter::once(w)).chain(b).collect();
        Ok(self.custom(
            &inputs,
            value,
            Box::new(move |g, inputs, needs| {
                let gd = g.data();
                let xd = inputs[0].data();
                let wd = inputs[1].data();
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; n * fin];
                    for s in 0..n {
                        for o in 0..fout {
                            kernels::axpy(
                                &mut dx[s * fin..(s + 1) * fin],
                                gd[s * fout + o],
                                &wd[o * fin..(o + 1) * fin],
                            );
                        }
                    }
                    Tensor::new(xshape.clone(), dx)
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![0.0; fout * fin];
                    for s in 0..n {
                        for o in 0..fout {
                            kernels::axpy(
                                &mut dw[o * fin..(o + 1) * fin],
                                gd[s * fout + o],
                                &xd[s * fin..(s + 1) * fin],
                            );
                        }
                    }
                    Tensor::new(vec![fout, fin], dw)
                });
                let mut res = vec![dx.transpose()?, dw.transpose()?];
                if needs.len() == 3 {
                    res.push(needs[2].then(|| {
                        let mut db = vec![0.0; fout];
                        for s in 0..n {
                            for o in 0..fout {
                                db[o] += gd[s * fout + o];
                            }
                        }
                        Tensor::from_vec(db)
                    }));
                }
                Ok(res)
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(|g, _, needs| Ok(vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())])),
        ))
    }

    /// Multiply channel `c` by `mask[c]` (0 or 1 in practice).
    pub fn channel_mask(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let xs = self.value(x);
        let (_, c, hw) = channel_layout(xs.shape(), "channel_mask")?;
        if mask.len() != c {
            return Err(Error::shape("channel_mask", format!("mask len {} for {c} channels", mask.len())));
        }
        let mask = mask.to_vec();
        let mut out = xs.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= mask[(i / hw) % c];
        }
        Ok(self.custom(
            &[x],
            out,
            Box::new(move |g, _, _| {
                let mut d = g.clone();
                for (i, v) in d.data_mut().iter_mut().enumerate() {
                    *v *= mask[(i / hw) % c];
                }
                Ok(vec![Some(d)])
            }),
        ))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.value(logits);
        let (n, k) = match ls.shape() {
            [n, k] => (*n, *k),
            s => return Err(Error::shape("cross_entropy", format!("logits must be [N, K], got {s:?}"))),
        };
        if labels.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for batch of {n}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape("cross_entropy", format!("label {bad} >= {k} classes")));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for s in 0..n {
            let row = &ls.data()[s * k..(s + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..k {
                probs[s * k + j] = (row[j] - mx).exp() / z;
            }
            loss += -(row[labels[s]] - mx - z.ln());
        }
        loss /= n as f64;
        let labels = labels.to_vec();
        let shape = ls.shape().to_vec();
        Ok(self.custom(
            &[logits],
            Tensor::scalar(loss),
            Box::new(move |g, _, _| {
                let scale = g.item() / n as f64;
                let mut d = probs.clone();
                for (s, &l) in labels.iter().enumerate() {
                    d[s * k + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                Ok(vec![Some(Tensor::new(shape.clone(), d)?)])
            }),
        ))
    }

    /// `coef * sum(|x|)`; the subgradient at 0 is taken as 0.
    pub fn abs_sum_scaled(&mut self, x: Var, coef: f64) -> Var {
        let s = coef * self.value(x).data().iter().map(|v| v.abs()).sum::<f64>();
        self.custom(
            &[x],
            Tensor::scalar(s),
            Box::new(move |g, inputs, _| {
                let gv = g.item() * coef;
                Ok(vec![Some(inputs[0].map(|v| gv * v.signum() * (v != 0.0) as u8 as f64))])
            }),
        )
    }

    /// Sum of scalar nodes.
    pub fn add_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let mut s = 0.0;
        for &x in xs {
            let v = self.value(x);
            if v.numel() != 1 {
                return Err(Error::shape("add_scalars", format!("non-scalar {:?}", v.shape())));
            }
            s += v.item();
        }
        let n = xs.len();
        Ok(self.custom(
            xs,
            Tensor::scalar(s),
            Box::new(move |g, inputs, needs| {
                Ok((0..n)
                    .map(|i| needs[i].then(|| Tensor::full(inputs[i].shape(), g.item())))
                    .collect())
            }),
        ))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.custom(&[x], value, Box::new(move |g, _, _| Ok(vec![Some(g.map(|v| v * c))])))
    }
}
