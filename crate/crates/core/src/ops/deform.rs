//! Deformable convolution: every kernel tap reads the input at its regular
//! grid position displaced by a learned fractional offset,
//!
//! ```text
//! y(p0) = sum over taps pn of  w(pn) * x(p0 + pn + offset(p0, pn))
//! ```
//!
//! One deformable group: the offset field is shared by all input channels.

use super::conv::{apply_columns, check_grad_shape, columns_backward, ConvParams, ConvRef};
use crate::error::{Error, Result};
use crate::tensor::{BilinearTaps, Tensor};

/// Per output location and per kernel tap, a `(row, col)` displacement in
/// input pixels. Channel `2 * t` holds the row offset of tap `t` (taps in
/// row-major kernel order), channel `2 * t + 1` the column offset.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField {
    pub offsets: Tensor,
}

impl OffsetField {
    pub fn new(offsets: Tensor) -> Result<Self> {
        let (c, ..) = offsets.dims3()?;
        if c % 2 != 0 {
            return Err(Error::invalid(format!("offset field needs an even channel count, got {c}")));
        }
        Ok(OffsetField { offsets })
    }

    pub fn zeros(kh: usize, kw: usize, oh: usize, ow: usize) -> Self {
        OffsetField {
            offsets: Tensor::zeros(&[2 * kh * kw, oh, ow]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformConvGrads {
    pub x: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
    pub offsets: Tensor,
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn geometry(x: &Tensor, conv: &ConvRef, off: &Tensor) -> Result<Geometry> {
    conv.validate()?;
    let (c, h, w) = x.dims3()?;
    let (_, cin, kh, kw) = conv.dims();
    if c != cin {
        return Err(Error::invalid(format!(
            "input has {c} channels but the kernel expects {cin}"
        )));
    }
    let (oh, ow) = conv.out_dims(h, w)?;
    let expected = [2 * kh * kw, oh, ow];
    let (oc, ohh, oww) = off.dims3()?;
    if [oc, ohh, oww] != expected {
        return Err(Error::invalid(format!(
            "offset field is {oc}x{ohh}x{oww} but the output grid needs {}x{}x{}",
            expected[0], expected[1], expected[2]
        )));
    }
    Ok(Geometry { c, h, w, kh, kw, oh, ow })
}

/// Bilinear taps for every (kernel tap, output position), tap-major.
fn sample_taps(g: &Geometry, conv: &ConvRef, off: &[f64]) -> Vec<BilinearTaps> {
    let p = g.oh * g.ow;
    let mut taps = Vec::with_capacity(g.kh * g.kw * p);
    for ki in 0..g.kh {
        for kj in 0..g.kw {
            let t = ki * g.kw + kj;
            let off_r = &off[2 * t * p..][..p];
            let off_c = &off[(2 * t + 1) * p..][..p];
            for oy in 0..g.oh {
                let base_r = (oy * conv.stride) as f64 - conv.pad as f64 + ki as f64;
                for ox in 0..g.ow {
                    let base_c = (ox * conv.stride) as f64 - conv.pad as f64 + kj as f64;
                    let q = oy * g.ow + ox;
                    taps.push(BilinearTaps::new(g.h, g.w, base_r + off_r[q], base_c + off_c[q]));
                }
            }
        }
    }
    taps
}

fn deform_columns(g: &Geometry, x: &[f64], taps: &[BilinearTaps]) -> Vec<f64> {
    let kk = g.kh * g.kw;
    let p = g.oh * g.ow;
    let mut col = vec![0.0; g.c * kk * p];
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for t in 0..kk {
            let row = &mut col[(ci * kk + t) * p..][..p];
            for (d, tap) in row.iter_mut().zip(&taps[t * p..(t + 1) * p]) {
                *d = tap.sample(plane);
            }
        }
    }
    col
}

pub fn deform_conv_forward(x: &Tensor, params: &ConvParams, off: &OffsetField) -> Result<Tensor> {
    deform_conv_forward_ref(x, &params.view(), &off.offsets)
}

pub fn deform_conv_forward_ref(x: &Tensor, conv: &ConvRef, off: &Tensor) -> Result<Tensor> {
    let g = geometry(x, conv, off)?;
    let taps = sample_taps(&g, conv, off.data());
    let col = deform_columns(&g, x.data(), &taps);
    Ok(apply_columns(conv, &col, g.oh, g.ow))
}

pub fn deform_conv_backward(
    x: &Tensor,
    params: &ConvParams,
    off: &OffsetField,
    grad_y: &Tensor,
) -> Result<DeformConvGrads> {
    deform_conv_backward_ref(x, &params.view(), &off.offsets, grad_y)
}

pub fn deform_conv_backward_ref(
    x: &Tensor,
    conv: &ConvRef,
    off: &Tensor,
    grad_y: &Tensor,
) -> Result<DeformConvGrads> {
    let g = geometry(x, conv, off)?;
    let (cout, ..) = conv.dims();
    check_grad_shape(grad_y, cout, g.oh, g.ow)?;
    let taps = sample_taps(&g, conv, off.data());
    let col = deform_columns(&g, x.data(), &taps);
    let p = g.oh * g.ow;
    let (gw, gb, gcol) = columns_backward(conv, &col, grad_y.data(), p);

    let kk = g.kh * g.kw;
    let mut gx = vec![0.0; g.c * g.h * g.w];
    let mut goff = vec![0.0; 2 * kk * p];
    for ci in 0..g.c {
        let plane = &x.data()[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        let gplane = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for t in 0..kk {
            let grow = &gcol[(ci * kk + t) * p..][..p];
            let (goff_r, goff_c) = goff[2 * t * p..(2 * t + 2) * p].split_at_mut(p);
            for q in 0..p {
                let up = grow[q];
                if up == 0.0 {
                    continue;
                }
                let tap = &taps[t * p + q];
                tap.scatter(gplane, up);
                let (dr, dc) = tap.grad_point(plane);
                goff_r[q] += up * dr;
                goff_c[q] += up * dc;
            }
        }
    }
    Ok(DeformConvGrads {
        x: Tensor::new(vec![g.c, g.h, g.w], gx)?,
        weights: gw,
        bias: gb,
        offsets: Tensor::new(vec![2 * kk, g.oh, g.ow], goff)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::conv::conv2d;

    #[test]
    fn constant_column_offset_shifts_left() {
        let x = Tensor::from_fn(&[1, 3, 4], |i| i as f64 + 1.0);
        let p = ConvParams::new(Tensor::ones(&[1, 1, 1, 1]), Tensor::zeros(&[1]), 1, 0).unwrap();
        let mut off = OffsetField::zeros(1, 1, 3, 4);
        off.offsets.plane_mut(1).fill(1.0);
        let y = deform_conv_forward(&x, &p, &off).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                let want = if c < 3 { x.get(&[0, r, c + 1]) } else { 0.0 };
                assert_eq!(y.get(&[0, r, c]), want);
            }
        }
    }

    #[test]
    fn zero_offsets_equal_conv() {
        let x = Tensor::from_fn(&[2, 5, 6], |i| ((i * 37) % 11) as f64 - 5.0);
        let w = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 13) % 7) as f64 * 0.1 - 0.3);
        let p = ConvParams::new(w, Tensor::from_fn(&[3], |i| i as f64), 2, 1).unwrap();
        let (oh, ow) = p.view().out_dims(5, 6).unwrap();
        let y = deform_conv_forward(&x, &p, &OffsetField::zeros(3, 3, oh, ow)).unwrap();
        assert_eq!(y, conv2d(&x, &p).unwrap());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let x = Tensor::ones(&[1, 4, 4]);
        let p = ConvParams::centered(Tensor::ones(&[1, 1, 3, 3]), Tensor::zeros(&[1]), 1).unwrap();
        let mut off = OffsetField::zeros(3, 3, 4, 4);
        off.offsets.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.3 + 0.01 * i as f64);
        let g = deform_conv_backward(&x, &p, &off, &Tensor::zeros(&[1, 4, 4])).unwrap();
        assert_eq!(g.x.max_abs(), 0.0);
        assert_eq!(g.weights.max_abs(), 0.0);
        assert_eq!(g.bias.max_abs(), 0.0);
        assert_eq!(g.offsets.max_abs(), 0.0);
    }

    #[test]
    fn offset_shape_mismatch_rejected() {
        let x = Tensor::ones(&[1, 4, 4]);
        let p = ConvParams::centered(Tensor::ones(&[1, 1, 3, 3]), Tensor::zeros(&[1]), 1).unwrap();
        let bad = OffsetField::zeros(3, 3, 3, 4);
        assert!(deform_conv_forward(&x, &p, &bad).is_err());
        assert!(OffsetField::new(Tensor::zeros(&[3, 2, 2])).is_err());
    }
}
