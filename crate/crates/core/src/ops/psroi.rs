//! Position-sensitive ROI pooling, plain and deformable.
//!
//! An ROI is cut into a `k x k` grid. Bin `(i, j)` reads only from channel
//! bank `i * k + j` of the score maps, so a bank holds `C` consecutive
//! channels and the maps carry `k * k * C` channels in total. Each bin is the
//! mean of a fixed 2x2 grid of bilinear samples at its quarter points.
//!
//! In the deformable variant every bin is translated by
//! `gamma * (roi height * dr, roi width * dc)` where `(dr, dc)` is that bin's
//! learned offset.

use crate::detection::BBox;
use crate::error::{Error, Result};
use crate::tensor::{BilinearTaps, Tensor};

/// Translation scale of bin offsets, as a fraction of ROI size.
pub const DEFAULT_OFFSET_GAMMA: f64 = 0.1;

const SUBSAMPLES: [f64; 2] = [0.25, 0.75];

#[derive(Debug, Clone, PartialEq)]
pub struct Roi {
    /// Box in input-image pixel coordinates.
    pub bbox: BBox,
    /// Bins per side.
    pub k: usize,
    /// `[2, k, k]` row/col offsets per bin.
    pub offsets: Option<Tensor>,
}

impl Roi {
    pub fn new(bbox: BBox, k: usize) -> Self {
        Roi {
            bbox,
            k,
            offsets: None,
        }
    }

    pub fn with_offsets(bbox: BBox, k: usize, offsets: Tensor) -> Self {
        Roi {
            bbox,
            k,
            offsets: Some(offsets),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.bbox.height() > 0.0 && self.bbox.width() > 0.0) {
            return Err(Error::invalid(format!(
                "ROI must have positive area, got {:?}",
                self.bbox
            )));
        }
        if self.k == 0 {
            return Err(Error::invalid("ROI pooling grid must have k >= 1"));
        }
        if let Some(off) = &self.offsets {
            if off.shape() != [2, self.k, self.k] {
                return Err(Error::invalid(format!(
                    "ROI offsets must be [2, {k}, {k}], got {:?}",
                    off.shape(),
                    k = self.k
                )));
            }
        }
        Ok(())
    }
}

/// Pooling geometry shared by all ROIs on one set of score maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsRoiPool {
    /// Class banks per bin.
    pub classes: usize,
    /// Feature cells per input pixel (1 / backbone stride).
    pub spatial_scale: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsRoiGrads {
    pub score_maps: Tensor,
    /// Present iff the ROI carried offsets.
    pub offsets: Option<Tensor>,
}

/// The four bilinear samples of one bin.
struct BinSamples {
    taps: [BilinearTaps; 4],
}

impl PsRoiPool {
    pub fn new(classes: usize, spatial_scale: f64) -> Self {
        PsRoiPool {
            classes,
            spatial_scale,
            gamma: DEFAULT_OFFSET_GAMMA,
        }
    }

    fn check(&self, maps: &Tensor, roi: &Roi) -> Result<(usize, usize)> {
        roi.validate()?;
        let (c, h, w) = maps.dims3()?;
        let want = roi.k * roi.k * self.classes;
        if c != want {
            return Err(Error::invalid(format!(
                "score maps have {c} channels, expected k^2 * C = {want}"
            )));
        }
        Ok((h, w))
    }

    /// Feature-map coordinate of an image position; feature cell `u` sits at
    /// image position `(u + 0.5) / spatial_scale`.
    fn to_feature(self, v: f64) -> f64 {
        v * self.spatial_scale - 0.5
    }

    fn bin_samples(&self, roi: &Roi, h: usize, w: usize, i: usize, j: usize) -> BinSamples {
        let k = roi.k as f64;
        let (rh, rw) = (roi.bbox.height(), roi.bbox.width());
        let (mut dr, mut dc) = (0.0, 0.0);
        if let Some(off) = &roi.offsets {
            dr = self.gamma * rh * off.get(&[0, i, j]);
            dc = self.gamma * rw * off.get(&[1, i, j]);
        }
        let mut taps = [BilinearTaps::new(0, 0, 0.0, 0.0); 4];
        let mut n = 0;
        for sr in SUBSAMPLES {
            let y = roi.bbox.row_min + (i as f64 + sr) * rh / k + dr;
            for sc in SUBSAMPLES {
                let x = roi.bbox.col_min + (j as f64 + sc) * rw / k + dc;
                taps[n] = BilinearTaps::new(h, w, self.to_feature(y), self.to_feature(x));
                n += 1;
            }
        }
        BinSamples { taps }
    }

    /// Pools `[C, k, k]` from `[k^2 * C, H, W]` score maps.
    pub fn forward(&self, maps: &Tensor, roi: &Roi) -> Result<Tensor> {
        let (h, w) = self.check(maps, roi)?;
        let k = roi.k;
        let mut out = Tensor::zeros(&[self.classes, k, k]);
        for i in 0..k {
            for j in 0..k {
                let bin = self.bin_samples(roi, h, w, i, j);
                let bank = (i * k + j) * self.classes;
                for c in 0..self.classes {
                    let plane = maps.plane(bank + c);
                    let s: f64 = bin.taps.iter().map(|t| t.sample(plane)).sum();
                    out.set(&[c, i, j], s / 4.0);
                }
            }
        }
        Ok(out)
    }

    /// Accumulates the gradient w.r.t. the score maps into `grad_maps` and
    /// returns the gradient w.r.t. the ROI's bin offsets (if it has any).
    pub fn backward_into(
        &self,
        maps: &Tensor,
        roi: &Roi,
        grad_out: &Tensor,
        grad_maps: &mut Tensor,
    ) -> Result<Option<Tensor>> {
        let (h, w) = self.check(maps, roi)?;
        let k = roi.k;
        if grad_out.shape() != [self.classes, k, k] {
            return Err(Error::invalid(format!(
                "upstream gradient must be [{}, {k}, {k}], got {:?}",
                self.classes,
                grad_out.shape()
            )));
        }
        if grad_maps.shape() != maps.shape() {
            return Err(Error::invalid("gradient buffer does not match the score maps"));
        }
        let mut goff = roi.offsets.as_ref().map(|_| Tensor::zeros(&[2, k, k]));
        let chain_r = self.gamma * roi.bbox.height() * self.spatial_scale;
        let chain_c = self.gamma * roi.bbox.width() * self.spatial_scale;
        for i in 0..k {
            for j in 0..k {
                let bin = self.bin_samples(roi, h, w, i, j);
                let bank = (i * k + j) * self.classes;
                let (mut gr, mut gc) = (0.0, 0.0);
                for c in 0..self.classes {
                    let up = grad_out.get(&[c, i, j]) / 4.0;
                    if up == 0.0 {
                        continue;
                    }
                    for t in &bin.taps {
                        t.scatter(grad_maps.plane_mut(bank + c), up);
                        if goff.is_some() {
                            let (dr, dc) = t.grad_point(maps.plane(bank + c));
                            gr += up * dr;
                            gc += up * dc;
                        }
                    }
                }
                if let Some(g) = goff.as_mut() {
                    g.set(&[0, i, j], gr * chain_r);
                    g.set(&[1, i, j], gc * chain_c);
                }
            }
        }
        Ok(goff)
    }

    pub fn backward(&self, maps: &Tensor, roi: &Roi, grad_out: &Tensor) -> Result<PsRoiGrads> {
        let mut grad_maps = Tensor::zeros(maps.shape());
        let offsets = self.backward_into(maps, roi, grad_out, &mut grad_maps)?;
        Ok(PsRoiGrads {
            score_maps: grad_maps,
            offsets,
        })
    }
}

/// Plain PS-ROI pooling; any offsets on `roi` are ignored.
pub fn ps_roi_pool(score_maps: &Tensor, roi: &Roi, classes: usize, spatial_scale: f64) -> Result<Tensor> {
    let plain = Roi::new(roi.bbox, roi.k);
    PsRoiPool::new(classes, spatial_scale).forward(score_maps, &plain)
}

/// Deformable PS-ROI pooling; `roi.offsets` must be present.
pub fn deform_ps_roi_pool(
    score_maps: &Tensor,
    roi: &Roi,
    classes: usize,
    spatial_scale: f64,
) -> Result<Tensor> {
    if roi.offsets.is_none() {
        return Err(Error::invalid("deformable PS-ROI pooling needs bin offsets"));
    }
    PsRoiPool::new(classes, spatial_scale).forward(score_maps, roi)
}

pub fn deform_ps_roi_pool_backward(
    score_maps: &Tensor,
    roi: &Roi,
    classes: usize,
    spatial_scale: f64,
    grad_out: &Tensor,
) -> Result<PsRoiGrads> {
    if roi.offsets.is_none() {
        return Err(Error::invalid("deformable PS-ROI pooling needs bin offsets"));
    }
    PsRoiPool::new(classes, spatial_scale).backward(score_maps, roi, grad_out)
}
