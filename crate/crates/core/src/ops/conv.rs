use std::borrow::Cow;

use super::gemm::{gemm, Op};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weights `[C_out, C_in, k_h, k_w]`, bias `[C_out]`, stride and zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weights: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvParams {
    pub fn new(weights: Tensor, bias: Tensor, stride: usize, pad: usize) -> Result<Self> {
        let p = ConvParams {
            weights,
            bias,
            stride,
            pad,
        };
        p.view().validate()?;
        Ok(p)
    }

    /// Padding that keeps the grid centred: `pad = k / 2`.
    pub fn centered(weights: Tensor, bias: Tensor, stride: usize) -> Result<Self> {
        let pad = weights.shape().get(2).copied().unwrap_or(1) / 2;
        Self::new(weights, bias, stride, pad)
    }

    pub fn view(&self) -> ConvRef<'_> {
        ConvRef {
            weights: &self.weights,
            bias: &self.bias,
            stride: self.stride,
            pad: self.pad,
        }
    }
}

/// Borrowed form of [`ConvParams`]; lets the network run layers straight out
/// of its parameter store.
#[derive(Debug, Clone, Copy)]
pub struct ConvRef<'a> {
    pub weights: &'a Tensor,
    pub bias: &'a Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvRef<'_> {
    /// `(C_out, C_in, k_h, k_w)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.weights.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.weights.shape();
        if s.len() != 4 {
            return Err(Error::invalid(format!(
                "conv weights must be [C_out, C_in, k_h, k_w], got {s:?}"
            )));
        }
        if s[2].is_multiple_of(2) || s[3].is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel extents must be odd, got {}x{}", s[2], s[3])));
        }
        if self.bias.shape() != [s[0]] {
            return Err(Error::invalid(format!(
                "bias shape {:?} does not match {} output channels",
                self.bias.shape(),
                s[0]
            )));
        }
        if self.stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        Ok(())
    }

    /// Output grid for an `h x w` input.
    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (_, _, kh, kw) = self.dims();
        Ok((
            out_extent(h, kh, self.pad, self.stride)?,
            out_extent(w, kw, self.pad, self.stride)?,
        ))
    }

    fn is_pointwise(&self) -> bool {
        let (_, _, kh, kw) = self.dims();
        kh == 1 && kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let (c, h, w) = x.dims3()?;
        let (_, cin, _, _) = self.dims();
        if c != cin {
            return Err(Error::invalid(format!(
                "input has {c} channels but the kernel expects {cin}"
            )));
        }
        Ok((c, h, w))
    }
}

pub fn out_extent(n: usize, k: usize, pad: usize, stride: usize) -> Result<usize> {
    let padded = n + 2 * pad;
    if padded < k {
        return Err(Error::invalid(format!(
            "kernel extent {k} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Unfolds `x` into a `[C_in * k_h * k_w, H' * W']` column matrix.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, conv: &ConvRef) -> Vec<f64> {
    let (_, _, kh, kw) = conv.dims();
    let (oh, ow) = conv.out_dims(h, w).expect("checked by caller");
    let p = oh * ow;
    let mut col = vec![0.0; c * kh * kw * p];
    let (s, pad) = (conv.stride as isize, conv.pad as isize);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut col[((ci * kh + ki) * kw + kj) * p..][..p];
                for oy in 0..oh {
                    let iy = oy as isize * s - pad + ki as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    let dst = &mut row[oy * ow..][..ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox as isize * s - pad + kj as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
fn col2im(col: &[f64], c: usize, h: usize, w: usize, conv: &ConvRef) -> Vec<f64> {
    let (_, _, kh, kw) = conv.dims();
    let (oh, ow) = conv.out_dims(h, w).expect("checked by caller");
    let p = oh * ow;
    let mut x = vec![0.0; c * h * w];
    let (s, pad) = (conv.stride as isize, conv.pad as isize);
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &col[((ci * kh + ki) * kw + kj) * p..][..p];
                for oy in 0..oh {
                    let iy = oy as isize * s - pad + ki as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..][..w];
                    let src = &row[oy * ow..][..ow];
                    for (ox, v) in src.iter().enumerate() {
                        let ix = ox as isize * s - pad + kj as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// `y = W * col + b` for a `[K, P]` column matrix.
pub(crate) fn apply_columns(conv: &ConvRef, col: &[f64], oh: usize, ow: usize) -> Tensor {
    let (cout, cin, kh, kw) = conv.dims();
    let k = cin * kh * kw;
    let p = oh * ow;
    let mut y = vec![0.0; cout * p];
    for (o, b) in conv.bias.data().iter().enumerate() {
        y[o * p..(o + 1) * p].fill(*b);
    }
    gemm(cout, k, p, 1.0, conv.weights.data(), Op::N, col, Op::N, 1.0, &mut y);
    Tensor::new(vec![cout, oh, ow], y).expect("consistent shape")
}

/// Weight and bias gradients plus the column-space gradient `W^T * grad_y`.
pub(crate) fn columns_backward(
    conv: &ConvRef,
    col: &[f64],
    grad_y: &[f64],
    p: usize,
) -> (Tensor, Tensor, Vec<f64>) {
    let (cout, cin, kh, kw) = conv.dims();
    let k = cin * kh * kw;
    let mut gw = vec![0.0; cout * k];
    gemm(cout, p, k, 1.0, grad_y, Op::N, col, Op::T, 0.0, &mut gw);
    let gb: Vec<f64> = (0..cout).map(|o| grad_y[o * p..(o + 1) * p].iter().sum()).collect();
    let mut gcol = vec![0.0; k * p];
    gemm(k, cout, p, 1.0, conv.weights.data(), Op::T, grad_y, Op::N, 0.0, &mut gcol);
    (
        Tensor::new(conv.weights.shape().to_vec(), gw).expect("consistent shape"),
        Tensor::new(vec![cout], gb).expect("consistent shape"),
        gcol,
    )
}

pub(crate) fn check_grad_shape(grad_y: &Tensor, c: usize, h: usize, w: usize) -> Result<()> {
    let (gc, gh, gw) = grad_y.dims3()?;
    if (gc, gh, gw) != (c, h, w) {
        return Err(Error::invalid(format!(
            "upstream gradient is {gc}x{gh}x{gw} but the output is {c}x{h}x{w}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub x: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn conv2d(x: &Tensor, params: &ConvParams) -> Result<Tensor> {
    conv2d_ref(x, &params.view())
}

pub fn conv2d_ref(x: &Tensor, conv: &ConvRef) -> Result<Tensor> {
    let (c, h, w) = conv.check_input(x)?;
    let (oh, ow) = conv.out_dims(h, w)?;
    let col: Cow<[f64]> = if conv.is_pointwise() {
        Cow::Borrowed(x.data())
    } else {
        Cow::Owned(im2col(x.data(), c, h, w, conv))
    };
    Ok(apply_columns(conv, &col, oh, ow))
}

pub fn conv2d_backward(x: &Tensor, params: &ConvParams, grad_y: &Tensor) -> Result<ConvGrads> {
    conv2d_backward_ref(x, &params.view(), grad_y)
}

pub fn conv2d_backward_ref(x: &Tensor, conv: &ConvRef, grad_y: &Tensor) -> Result<ConvGrads> {
    let (c, h, w) = conv.check_input(x)?;
    let (oh, ow) = conv.out_dims(h, w)?;
    let (cout, ..) = conv.dims();
    check_grad_shape(grad_y, cout, oh, ow)?;
    let pointwise = conv.is_pointwise();
    let col: Cow<[f64]> = if pointwise {
        Cow::Borrowed(x.data())
    } else {
        Cow::Owned(im2col(x.data(), c, h, w, conv))
    };
    let (gw, gb, gcol) = columns_backward(conv, &col, grad_y.data(), oh * ow);
    let gx = if pointwise { gcol } else { col2im(&gcol, c, h, w, conv) };
    Ok(ConvGrads {
        x: Tensor::new(vec![c, h, w], gx)?,
        weights: gw,
        bias: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct six-deep loop over output channel, output position, input
    /// channel and kernel tap.
    fn conv_oracle(x: &Tensor, p: &ConvParams) -> Tensor {
        let (c, h, w) = x.dims3().unwrap();
        let s = p.weights.shape();
        let (co, kh, kw) = (s[0], s[2], s[3]);
        let oh = (h + 2 * p.pad - kh) / p.stride + 1;
        let ow = (w + 2 * p.pad - kw) / p.stride + 1;
        let mut y = Tensor::zeros(&[co, oh, ow]);
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = p.bias.data()[o];
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * p.stride + ki) as isize - p.pad as isize;
                                let ix = (ox * p.stride + kj) as isize - p.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += p.weights.get(&[o, ci, ki, kj])
                                        * x.get(&[ci, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    y.set(&[o, oy, ox], acc);
                }
            }
        }
        y
    }

    #[test]
    fn identity_1x1() {
        let x = Tensor::from_fn(&[1, 4, 5], |i| i as f64 - 3.0);
        let p = ConvParams::new(Tensor::ones(&[1, 1, 1, 1]), Tensor::zeros(&[1]), 1, 0).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn ones_3x3() {
        let x = Tensor::ones(&[1, 3, 3]);
        let p = ConvParams::new(Tensor::ones(&[1, 1, 3, 3]), Tensor::zeros(&[1]), 1, 0).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let x = random(&[2, 8, 8], &mut rng);
            let p = ConvParams::new(random(&[4, 2, 3, 3], &mut rng), random(&[4], &mut rng), stride, pad)
                .unwrap();
            let y = conv2d(&x, &p).unwrap();
            let o = conv_oracle(&x, &p);
            assert_eq!(y.shape(), o.shape());
            let diff = y.data().iter().zip(o.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(diff <= 1e-12, "stride {stride} pad {pad}: {diff}");
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <grad_y, conv(x)> is bilinear, so the gradients are checked against
        // the oracle by linearity in x and in the weights.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[3, 7, 6], &mut rng);
        let p = ConvParams::new(random(&[2, 3, 3, 3], &mut rng), Tensor::zeros(&[2]), 2, 1).unwrap();
        let g = random(conv2d(&x, &p).unwrap().shape(), &mut rng);
        let grads = conv2d_backward(&x, &p, &g).unwrap();
        let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(u, v)| u * v).sum::<f64>();
        let lhs = dot(&g, &conv_oracle(&x, &p));
        assert!((dot(&grads.x, &x) - lhs).abs() < 1e-10);
        assert!((dot(&grads.weights, &p.weights) - lhs).abs() < 1e-10);
        assert!((grads.bias.sum() - g.sum()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_shapes() {
        let x = Tensor::zeros(&[3, 5, 5]);
        let p = ConvParams::new(Tensor::ones(&[1, 2, 3, 3]), Tensor::zeros(&[1]), 1, 1).unwrap();
        assert!(conv2d(&x, &p).is_err());
        assert!(ConvParams::new(Tensor::ones(&[1, 1, 2, 2]), Tensor::zeros(&[1]), 1, 0).is_err());
        assert!(ConvParams::new(Tensor::ones(&[1, 1, 3, 3]), Tensor::zeros(&[2]), 1, 0).is_err());
        let p = ConvParams::new(Tensor::ones(&[1, 3, 3, 3]), Tensor::zeros(&[1]), 1, 1).unwrap();
        assert!(conv2d_backward(&x, &p, &Tensor::zeros(&[1, 4, 4])).is_err());
    }
}
