//! Raw NCHW kernels shared by the differentiable ops.
//!
//! Convolution works through a transposed im2col buffer `cols[p * R + r]`
//! (`p` = output position, `r` = flattened `(c, ky, kx)`), which keeps every
//! inner loop running over the long reduction axis.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, wd) = match x {
            [n, c, h, w] => (*n, *c, *h, *w),
            _ => return Err(Error::shape("conv2d", format!("input must be NCHW, got {x:?}"))),
        };
        let (o, ci, kh, kw) = match w {
            [o, ci, kh, kw] => (*o, *ci, *kh, *kw),
            _ => return Err(Error::shape("conv2d", format!("weight must be OCkk, got {w:?}"))),
        };
        if ci != c {
            return Err(Error::shape(
                "conv2d",
                format!("input {x:?} has {c} channels but weight {w:?} expects {ci}"),
            ));
        }
        if kh != kw {
            return Err(Error::shape("conv2d", format!("kernel must be square, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh} larger than padded input {h}x{wd} (pad {pad})"),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        Ok(Self {
            n,
            c,
            h,
            w: wd,
            o,
            k: kh,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.oh, self.ow]
    }
}

pub fn output_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let r_len = g.rows();
    let kk = g.k * g.k;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let p = oy * g.ow + ox;
            let row = &mut cols[p * r_len..(p + 1) * r_len];
            for c in 0..g.c {
                let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        let r = c * kk + ky * g.k + kx;
                        row[r] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            plane[iy as usize * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let r_len = g.rows();
    let kk = g.k * g.k;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let p = oy * g.ow + ox;
            let row = &cols[p * r_len..(p + 1) * r_len];
            for c in 0..g.c {
                let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        plane[iy as usize * g.w + ix as usize] += row[c * kk + ky * g.k + kx];
                    }
                }
            }
        }
    }
}

/// Cross-correlation, no bias. Output `[n, o, oh, ow]`.
pub fn conv2d_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let r_len = g.rows();
    let pcount = g.positions();
    let img_len = g.c * g.h * g.w;
    let mut out = vec![0.0; g.n * g.o * pcount];
    let mut cols = vec![0.0; pcount * r_len];
    for b in 0..g.n {
        im2col(&x[b * img_len..(b + 1) * img_len], g, &mut cols);
        let ob = &mut out[b * g.o * pcount..(b + 1) * g.o * pcount];
        for o in 0..g.o {
            let wrow = &w[o * r_len..(o + 1) * r_len];
            for p in 0..pcount {
                ob[o * pcount + p] = dot(wrow, &cols[p * r_len..(p + 1) * r_len]);
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input and weight.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let r_len = g.rows();
    let pcount = g.positions();
    let img_len = g.c * g.h * g.w;
    let mut dx = need_dx.then(|| vec![0.0; g.n * img_len]);
    let mut dw = need_dw.then(|| vec![0.0; g.o * r_len]);
    let mut cols = vec![0.0; pcount * r_len];
    let mut dcols = vec![0.0; pcount * r_len];
    for b in 0..g.n {
        let gb = &gout[b * g.o * pcount..(b + 1) * g.o * pcount];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[b * img_len..(b + 1) * img_len], g, &mut cols);
            for o in 0..g.o {
                let drow = &mut dw[o * r_len..(o + 1) * r_len];
                for p in 0..pcount {
                    let gv = gb[o * pcount + p];
                    if gv != 0.0 {
                        axpy(drow, gv, &cols[p * r_len..(p + 1) * r_len]);
                    }
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            dcols.iter_mut().for_each(|v| *v = 0.0);
            for p in 0..pcount {
                let drow = &mut dcols[p * r_len..(p + 1) * r_len];
                for o in 0..g.o {
                    let gv = gb[o * pcount + p];
                    if gv != 0.0 {
                        axpy(drow, gv, &w[o * r_len..(o + 1) * r_len]);
                    }
                }
            }
            col2im_add(&dcols, g, &mut dx[b * img_len..(b + 1) * img_len]);
        }
    }
    (dx, dw)
}

/// Max pooling without padding. Returns output and the flat input index of each maximum.
pub fn maxpool_forward(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let oh = output_size(h, k, stride, 0);
    let ow = output_size(w, k, stride, 0);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg, oh, ow)
}
