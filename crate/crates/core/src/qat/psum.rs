//! Segmented convolution with ADC partial-sum quantization.
//!
//! A conv's input channels are split into bitline segments. Each segment's
//! integer partial sum `p = conv(Qa_g, Qw_g)` crosses an ADC:
//! `code = round(clip(p / d))` with `d = S_ADC / S_A`. Codes of all segments
//! are summed and scaled by `S_W * S_ADC`.

use std::ops::Range;

use crate::autograd::kernels::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::autograd::{Graph, Var};
use super::quant::round_half_away;
use crate::config::ClipBounds;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frozen quantizer state and geometry of one segmented conv.
#[derive(Debug, Clone, PartialEq)]
pub struct PsumParams {
    pub act_step: f64,
    pub weight_step: f64,
    pub adc_step: f64,
    pub stride: usize,
    pub pad: usize,
    pub segments: Vec<Range<usize>>,
    pub adc: ClipBounds,
}

impl PsumParams {
    /// ADC divisor in the integer domain.
    pub fn divisor(&self) -> f64 {
        self.adc_step / self.act_step
    }

    /// Scale from accumulated codes to the real output.
    pub fn out_scale(&self) -> f64 {
        self.weight_step * self.adc_step
    }
}

/// ADC code for one integer partial sum.
#[inline]
pub fn adc_code(p: f64, divisor: f64, adc: ClipBounds) -> f64 {
    round_half_away((p / divisor).clamp(adc.lo(), adc.hi()))
}

/// Result of the integer part of a segmented conv.
#[derive(Debug, Clone)]
pub struct PsumCodes {
    /// Per segment, codes in `[n, o, oh, ow]` order.
    pub codes: Vec<Vec<f64>>,
    /// Per segment, whether `p / d` fell inside the ADC range.
    pub in_range: Vec<Vec<bool>>,
    /// Per segment, raw integer partial sums.
    pub partials: Vec<Vec<f64>>,
    /// Sum of codes over segments.
    pub acc: Vec<f64>,
    pub out_shape: Vec<usize>,
}

impl PsumCodes {
    pub fn clipped(&self) -> usize {
        self.in_range.iter().flatten().filter(|ok| !**ok).count()
    }

    pub fn conversions(&self) -> usize {
        self.in_range.iter().map(Vec::len).sum()
    }
}

fn segment_geom(shape_x: &[usize], shape_w: &[usize], r: &Range<usize>, stride: usize, pad: usize) -> Result<ConvGeom> {
    let mut xs = shape_x.to_vec();
    let mut ws = shape_w.to_vec();
    xs[1] = r.len();
    ws[1] = r.len();
    ConvGeom::new(&xs, &ws, stride, pad)
}

fn check_segments(c: usize, p: &PsumParams) -> Result<()> {
    let mut next = 0;
    for r in &p.segments {
        if r.start != next || r.is_empty() {
            return Err(Error::shape("segmented_conv", format!("segments {:?} do not tile {c} channels", p.segments)));
        }
        next = r.end;
    }
    if next != c {
        return Err(Error::shape("segmented_conv", format!("segments {:?} do not tile {c} channels", p.segments)));
    }
    Ok(())
}

/// Integer partial sums and ADC codes from integer activations `qa` and weights `qw`.
pub fn psum_codes(qa: &Tensor, qw: &Tensor, p: &PsumParams) -> Result<PsumCodes> {
    let full = ConvGeom::new(qa.shape(), qw.shape(), p.stride, p.pad)?;
    check_segments(full.c, p)?;
    let d = p.divisor();
    let out_len = full.n * full.o * full.positions();
    let mut acc = vec![0.0; out_len];
    let (mut codes, mut in_range, mut partials) = (Vec::new(), Vec::new(), Vec::new());
    for r in &p.segments {
        let g = segment_geom(qa.shape(), qw.shape(), r, p.stride, p.pad)?;
        let xs = qa.slice_channels(r.start, r.end)?;
        let ws = qw.slice_channels(r.start, r.end)?;
        let part = conv2d_forward(xs.data(), ws.data(), &g);
        let mut cs = Vec::with_capacity(out_len);
        let mut ok = Vec::with_capacity(out_len);
        for (i, &v) in part.iter().enumerate() {
            let c = adc_code(v, d, p.adc);
            ok.push(p.adc.contains(v / d));
            acc[i] += c;
            cs.push(c);
        }
        codes.push(cs);
        in_range.push(ok);
        partials.push(part);
    }
    Ok(PsumCodes {
        codes,
        in_range,
        partials,
        acc,
        out_shape: full.out_shape(),
    })
}

/// Integer codes recovered from dequantized values `x = q * step`.
pub fn to_integers(x: &Tensor, step: f64) -> Tensor {
    x.map(|v| round_half_away(v / step))
}

impl Graph {
    /// Segmented conv over fake-quantized activations `xhat` and weights
    /// `what`, with every segment's partial sum quantized by the ADC.
    ///
    /// Backward treats rounding as identity and zeroes the gradient of
    /// partial sums that were clipped; no gradient reaches the steps.
    pub fn psum_conv(&mut self, xhat: Var, what: Var, p: &PsumParams) -> Result<Var> {
        let qa = to_integers(self.value(xhat), p.act_step);
        let qw = to_integers(self.value(what), p.weight_step);
        let res = psum_codes(&qa, &qw, p)?;
        let s = p.out_scale();
        let out = Tensor::new(res.out_shape.clone(), res.acc.iter().map(|a| a * s).collect())?;
        let segs = p.segments.clone();
        let (stride, pad) = (p.stride, p.pad);
        let masks = res.in_range;
        Ok(self.custom(
            &[xhat, what],
            out,
            Box::new(move |g, inputs, needs| {
                let (x, w) = (inputs[0], inputs[1]);
                let (n, c, h, wd) = x.dims4("psum_conv")?;
                let per_w = w.numel() / w.shape()[0];
                let k2 = per_w / c;
                let mut dx = needs[0].then(|| vec![0.0; x.numel()]);
                let mut dw = needs[1].then(|| vec![0.0; w.numel()]);
                for (r, mask) in segs.iter().zip(&masks) {
                    let geom = segment_geom(x.shape(), w.shape(), r, stride, pad)?;
                    let gseg: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(mask)
                        .map(|(v, ok)| if *ok { *v } else { 0.0 })
                        .collect();
                    let xs = x.slice_channels(r.start, r.end)?;
                    let ws = w.slice_channels(r.start, r.end)?;
                    let (sdx, sdw) = conv2d_backward(xs.data(), ws.data(), &gseg, &geom, needs[0], needs[1]);
                    if let (Some(dx), Some(sdx)) = (dx.as_mut(), sdx) {
                        let hw = h * wd;
                        for b in 0..n {
                            let src = &sdx[b * r.len() * hw..(b + 1) * r.len() * hw];
                            let dst = b * c * hw + r.start * hw;
                            dx[dst..dst + src.len()].copy_from_slice(src);
                        }
                    }
                    if let (Some(dw), Some(sdw)) = (dw.as_mut(), sdw) {
                        let seg_len = r.len() * k2;
                        for o in 0..w.shape()[0] {
                            let src = &sdw[o * seg_len..(o + 1) * seg_len];
                            let dst = o * per_w + r.start * k2;
                            dw[dst..dst + seg_len].copy_from_slice(src);
                        }
                    }
                }
                Ok(vec![
                    dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
                    dw.map(|d| Tensor::new(w.shape().to_vec(), d)).transpose()?,
                ])
            }),
        ))
    }
}
