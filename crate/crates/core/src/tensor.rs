//! Dense row-major tensors and the bilinear sampling kernel.
//!
//! Feature maps are stored channel-major (`[C, H, W]`); a leading batch axis
//! is allowed but the pipeline always runs one image at a time.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub const MAX_RANK: usize = 4;

    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Interprets the tensor as `[C, H, W]`, accepting a unit batch axis or a
    /// bare 2-D map (one channel).
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [h, w] => Ok((1, h, w)),
            [c, h, w] => Ok((c, h, w)),
            [1, c, h, w] => Ok((c, h, w)),
            _ => Err(Error::invalid(format!(
                "expected a [C, H, W] feature map, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| {
            assert!(i < n, "index {idx:?} out of bounds for {:?}", self.shape);
            acc * n + i
        })
    }

    /// Channel `c` of a `[C, H, W]` map as a flat `H * W` slice.
    pub fn plane(&self, c: usize) -> &[f64] {
        let (_, h, w) = self.dims3().expect("plane() needs a feature map");
        &self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let (_, h, w) = self.dims3().expect("plane_mut() needs a feature map");
        &mut self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        })
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    /// Derivative mask of `relu` at `self`; zero at the origin.
    pub fn relu_grad(&self) -> Tensor {
        self.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Sums out one axis; the result keeps the remaining axes in order
    /// (a rank-1 input reduces to shape `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::invalid(format!(
                "axis {axis} out of range for rank {}",
                self.rank()
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &self.data[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape: Vec<usize> = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Tensor::new(shape, out)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let n = *self
            .shape
            .get(axis)
            .ok_or_else(|| Error::invalid(format!("axis {axis} out of range")))?;
        Ok(self.sum_axis(axis)?.mul_scalar(1.0 / n as f64))
    }

    fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::invalid(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > Tensor::MAX_RANK {
        return Err(Error::invalid(format!(
            "tensor rank must be 1..={}, got {}",
            Tensor::MAX_RANK,
            shape.len()
        )));
    }
    if shape.contains(&0) {
        return Err(Error::invalid(format!("zero extent in shape {shape:?}")));
    }
    Ok(())
}

/// A (row, col) location in pixel units of the map being sampled.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub row: f64,
    pub col: f64,
}

impl Point2 {
    pub const fn new(row: f64, col: f64) -> Self {
        Point2 { row, col }
    }

    pub fn is_finite(&self) -> bool {
        self.row.is_finite() && self.col.is_finite()
    }
}

/// The four bilinear neighbours of a sample location together with their
/// weights and the weights' derivatives along each axis.
///
/// Neighbours that fall outside the map carry zero weight and zero
/// derivative (zero padding), so callers can accumulate through all four
/// slots unconditionally. The derivative is the right-sided limit at integer
/// coordinates.
#[derive(Debug, Clone, Copy)]
pub struct BilinearTaps {
    pub index: [usize; 4],
    pub weight: [f64; 4],
    pub d_row: [f64; 4],
    pub d_col: [f64; 4],
}

impl BilinearTaps {
    #[inline]
    pub fn new(h: usize, w: usize, row: f64, col: f64) -> Self {
        let r0f = row.floor();
        let c0f = col.floor();
        let fr = row - r0f;
        let fc = col - c0f;
        let r0 = r0f as isize;
        let c0 = c0f as isize;
        let corners = [(r0, c0), (r0, c0 + 1), (r0 + 1, c0), (r0 + 1, c0 + 1)];
        let weight = [(1.0 - fr) * (1.0 - fc), (1.0 - fr) * fc, fr * (1.0 - fc), fr * fc];
        let d_row = [-(1.0 - fc), -fc, 1.0 - fc, fc];
        let d_col = [-(1.0 - fr), 1.0 - fr, -fr, fr];
        let mut taps = BilinearTaps {
            index: [0; 4],
            weight: [0.0; 4],
            d_row: [0.0; 4],
            d_col: [0.0; 4],
        };
        for (k, &(r, c)) in corners.iter().enumerate() {
            if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
                taps.index[k] = r as usize * w + c as usize;
                taps.weight[k] = weight[k];
                taps.d_row[k] = d_row[k];
                taps.d_col[k] = d_col[k];
            }
        }
        taps
    }

    #[inline]
    pub fn sample(&self, plane: &[f64]) -> f64 {
        (0..4).map(|k| self.weight[k] * plane[self.index[k]]).sum()
    }

    /// `(d/drow, d/dcol)` of the sampled value.
    #[inline]
    pub fn grad_point(&self, plane: &[f64]) -> (f64, f64) {
        let mut gr = 0.0;
        let mut gc = 0.0;
        for k in 0..4 {
            let v = plane[self.index[k]];
            gr += self.d_row[k] * v;
            gc += self.d_col[k] * v;
        }
        (gr, gc)
    }

    #[inline]
    pub fn scatter(&self, grad_plane: &mut [f64], upstream: f64) {
        for k in 0..4 {
            grad_plane[self.index[k]] += self.weight[k] * upstream;
        }
    }
}

fn plane_of(x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [h, w] => Ok((h, w)),
        [1, h, w] | [1, 1, h, w] => Ok((h, w)),
        _ => Err(Error::invalid(format!(
            "bilinear sampling needs a single-channel 2-D map, got {:?}",
            x.shape()
        ))),
    }
}

fn check_point(p: Point2) -> Result<()> {
    if !p.is_finite() {
        return Err(Error::invalid(format!("non-finite sample location {p:?}")));
    }
    Ok(())
}

/// Samples a single-channel map at a fractional location with the bilinear
/// (tent) kernel; locations outside the map read zeros.
pub fn bilinear_sample(x: &Tensor, p: Point2) -> Result<f64> {
    let (h, w) = plane_of(x)?;
    check_point(p)?;
    Ok(BilinearTaps::new(h, w, p.row, p.col).sample(x.data()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BilinearGrad {
    /// `((row, col), value)` for every neighbour that receives weight.
    pub grad_x: Vec<((usize, usize), f64)>,
    pub grad_p: Point2,
}

pub fn bilinear_sample_grad(x: &Tensor, p: Point2, upstream: f64) -> Result<BilinearGrad> {
    let (h, w) = plane_of(x)?;
    check_point(p)?;
    let taps = BilinearTaps::new(h, w, p.row, p.col);
    let (gr, gc) = taps.grad_point(x.data());
    let mut grad_x: Vec<((usize, usize), f64)> = Vec::with_capacity(4);
    for k in 0..4 {
        if taps.weight[k] != 0.0 {
            let idx = taps.index[k];
            grad_x.push(((idx / w, idx % w), taps.weight[k] * upstream));
        }
    }
    Ok(BilinearGrad {
        grad_x,
        grad_p: Point2::new(upstream * gr, upstream * gc),
    })
}

/// Max-subtracted softmax.
/// ChaCha8 generator keyed by up to four words, so that independent streams
/// (per exam, per epoch and image, ...) never overlap.
pub fn seeded_rng(key: &[u64]) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    assert!(key.len() <= 4, "seeded_rng takes at most four key words");
    let mut seed = [0u8; 32];
    for (chunk, k) in seed.chunks_exact_mut(8).zip(key) {
        chunk.copy_from_slice(&k.to_le_bytes());
    }
    rand_chacha::ChaCha8Rng::from_seed(seed)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
