//! The full detector: backbone, RPN branch, and the deformable
//! position-sensitive ROI branch.
//!
//! Anchor `a` at feature cell `(y, x)` with per-location type `t` has index
//! `(y * W + x) * A + t`; its objectness logits live in RPN channels
//! `2t` (negative) and `2t + 1` (foreground), its deltas in `4t..4t + 4`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{default_specs, total_stride, Backbone, BackboneCache, BlockSpec, ConvLayer};
use crate::detection::{decode_box, generate_anchors, propose, BBox, Detection, FindingClass, ProposalConfig};
use crate::error::{Error, Result};
use crate::ops::psroi::{PsRoiPool, Roi, DEFAULT_OFFSET_GAMMA};
use crate::params::ModelParams;
use crate::tensor::{softmax, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub blocks: Vec<BlockSpec>,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    /// Bins per ROI side.
    pub pool_size: usize,
    pub rpn_channels: usize,
    /// Offset branches on the 3x3 units of the last backbone block.
    pub deformable_backbone: bool,
    /// Learned bin offsets in ROI pooling.
    pub deformable_roi: bool,
    pub offset_gamma: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            blocks: default_specs(),
            anchor_scales: vec![8.0, 16.0, 32.0, 64.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            pool_size: 3,
            rpn_channels: 16,
            deformable_backbone: true,
            deformable_roi: true,
            offset_gamma: DEFAULT_OFFSET_GAMMA,
            init_seed: 17,
        }
    }
}

impl ModelConfig {
    pub fn stride(&self) -> usize {
        total_stride(&self.blocks)
    }

    pub fn anchor_config(&self) -> crate::detection::AnchorConfig {
        crate::detection::AnchorConfig {
            base_scales: self.anchor_scales.clone(),
            aspect_ratios: self.anchor_ratios.clone(),
            stride: self.stride(),
        }
    }
}

const CLASSES: usize = FindingClass::COUNT;

#[derive(Debug, Clone)]
pub struct Network {
    cfg: ModelConfig,
    pub backbone: Backbone,
    rpn_conv: ConvLayer,
    rpn_cls: ConvLayer,
    rpn_reg: ConvLayer,
    cls_maps: ConvLayer,
    reg_maps: ConvLayer,
    off_maps: Option<ConvLayer>,
    anchors_per_location: usize,
}

/// Everything the losses and the backward pass need from one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub image_hw: (usize, usize),
    pub feat_hw: (usize, usize),
    pub feats: Tensor,
    backbone_cache: BackboneCache,
    pub rpn_hidden: Tensor,
    pub rpn_logits: Tensor,
    pub rpn_deltas: Tensor,
    pub cls_maps: Tensor,
    pub reg_maps: Tensor,
    pub off_maps: Option<Tensor>,
}

/// Upstream gradients w.r.t. the head outputs of a [`Forward`].
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub rpn_logits: Tensor,
    pub rpn_deltas: Tensor,
    pub cls_maps: Tensor,
    pub reg_maps: Tensor,
    pub off_maps: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiOutput {
    pub roi: Roi,
    pub logits: [f64; CLASSES],
    pub deltas: [f64; 4],
}

impl Network {
    /// Builds the layer graph and freshly initialized parameters.
    pub fn build(cfg: &ModelConfig) -> Result<(Network, ModelParams)> {
        if cfg.pool_size == 0 || cfg.rpn_channels == 0 {
            return Err(Error::invalid("pool_size and rpn_channels must be positive"));
        }
        let anchor_cfg = cfg.anchor_config();
        anchor_cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut params = ModelParams::new();
        let backbone = Backbone::build(&cfg.blocks, 1, cfg.deformable_backbone, "backbone", &mut params, &mut rng)?;
        let c = backbone.out_channels();
        let a = anchor_cfg.per_location();
        let k2 = cfg.pool_size * cfg.pool_size;
        let rpn_conv = ConvLayer::register(&mut params, "rpn.conv", [cfg.rpn_channels, c, 3, 3], 1, &mut rng)?;
        let rpn_cls = ConvLayer::register(&mut params, "rpn.cls", [2 * a, cfg.rpn_channels, 1, 1], 1, &mut rng)?;
        let rpn_reg = ConvLayer::register(&mut params, "rpn.reg", [4 * a, cfg.rpn_channels, 1, 1], 1, &mut rng)?;
        let cls_maps = ConvLayer::register(&mut params, "roi.cls_maps", [k2 * CLASSES, c, 1, 1], 1, &mut rng)?;
        let reg_maps = ConvLayer::register(&mut params, "roi.reg_maps", [k2 * 4, c, 1, 1], 1, &mut rng)?;
        for (layer, gain) in [(&rpn_cls, 0.1), (&rpn_reg, 0.01), (&cls_maps, 0.1), (&reg_maps, 0.01)] {
            let w = params.tensor_mut(layer.w);
            *w = w.mul_scalar(gain);
        }
        let off_maps = if cfg.deformable_roi {
            let w = Tensor::zeros(&[k2 * 2, c, 1, 1]);
            Some(ConvLayer::register_with(&mut params, "roi.offset_maps", w, 1)?)
        } else {
            None
        };
        let net = Network {
            cfg: cfg.clone(),
            backbone,
            rpn_conv,
            rpn_cls,
            rpn_reg,
            cls_maps,
            reg_maps,
            off_maps,
            anchors_per_location: a,
        };
        Ok((net, params))
    }

    /// Rebuilds the graph for `cfg` and checks that `params` fits it.
    pub fn for_params(cfg: &ModelConfig, params: &ModelParams) -> Result<Network> {
        let (net, fresh) = Network::build(cfg)?;
        fresh
            .check_layout(params)
            .map_err(|e| Error::invalid(format!("weights do not match the model config: {e}")))?;
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn stride(&self) -> usize {
        self.backbone.stride()
    }

    pub fn anchors_per_location(&self) -> usize {
        self.anchors_per_location
    }

    pub fn anchors(&self, feat_h: usize, feat_w: usize) -> Vec<BBox> {
        generate_anchors(&self.cfg.anchor_config(), feat_h, feat_w)
    }

    fn pool(&self, classes: usize) -> PsRoiPool {
        PsRoiPool {
            classes,
            spatial_scale: 1.0 / self.stride() as f64,
            gamma: self.cfg.offset_gamma,
        }
    }

    pub fn forward(&self, params: &ModelParams, image: &Tensor) -> Result<Forward> {
        let (_, h, w) = image.dims3()?;
        let (feats, backbone_cache) = self.backbone.forward(params, image)?;
        let (_, fh, fw) = feats.dims3()?;
        let rpn_hidden = self.rpn_conv.forward(params, &feats)?.relu();
        let rpn_logits = self.rpn_cls.forward(params, &rpn_hidden)?;
        let rpn_deltas = self.rpn_reg.forward(params, &rpn_hidden)?;
        let cls_maps = self.cls_maps.forward(params, &feats)?;
        let reg_maps = self.reg_maps.forward(params, &feats)?;
        let off_maps = match &self.off_maps {
            Some(l) => Some(l.forward(params, &feats)?),
            None => None,
        };
        Ok(Forward {
            image_hw: (h, w),
            feat_hw: (fh, fw),
            feats,
            backbone_cache,
            rpn_hidden,
            rpn_logits,
            rpn_deltas,
            cls_maps,
            reg_maps,
            off_maps,
        })
    }

    /// Per-anchor `[negative, foreground]` logits, in anchor order.
    pub fn rpn_anchor_logits(&self, fwd: &Forward) -> Vec<[f64; 2]> {
        let (fh, fw) = fwd.feat_hw;
        let a = self.anchors_per_location;
        let p = fh * fw;
        let d = fwd.rpn_logits.data();
        let mut out = Vec::with_capacity(p * a);
        for q in 0..p {
            for t in 0..a {
                out.push([d[2 * t * p + q], d[(2 * t + 1) * p + q]]);
            }
        }
        out
    }

    pub fn rpn_anchor_deltas(&self, fwd: &Forward) -> Vec<[f64; 4]> {
        let (fh, fw) = fwd.feat_hw;
        let a = self.anchors_per_location;
        let p = fh * fw;
        let d = fwd.rpn_deltas.data();
        let mut out = Vec::with_capacity(p * a);
        for q in 0..p {
            for t in 0..a {
                out.push(std::array::from_fn(|j| d[(4 * t + j) * p + q]));
            }
        }
        out
    }

    /// Scatters per-anchor logit gradients back into RPN channel layout.
    pub fn rpn_logit_grad(&self, fwd: &Forward, per_anchor: &[(usize, [f64; 2])], grad: &mut Tensor) {
        let (fh, fw) = fwd.feat_hw;
        let p = fh * fw;
        let a = self.anchors_per_location;
        let d = grad.data_mut();
        for &(idx, g) in per_anchor {
            let (q, t) = (idx / a, idx % a);
            d[2 * t * p + q] += g[0];
            d[(2 * t + 1) * p + q] += g[1];
        }
    }

    pub fn rpn_delta_grad(&self, fwd: &Forward, per_anchor: &[(usize, [f64; 4])], grad: &mut Tensor) {
        let (fh, fw) = fwd.feat_hw;
        let p = fh * fw;
        let a = self.anchors_per_location;
        let d = grad.data_mut();
        for &(idx, g) in per_anchor {
            let (q, t) = (idx / a, idx % a);
            for (j, gj) in g.iter().enumerate() {
                d[(4 * t + j) * p + q] += gj;
            }
        }
    }

    /// Foreground probability per anchor.
    pub fn objectness(&self, fwd: &Forward) -> Vec<f64> {
        self.rpn_anchor_logits(fwd).iter().map(|l| softmax(l)[1]).collect()
    }

    pub fn proposals(&self, fwd: &Forward, cfg: &ProposalConfig) -> Result<Vec<crate::detection::Proposal>> {
        let anchors = self.anchors(fwd.feat_hw.0, fwd.feat_hw.1);
        propose(&self.objectness(fwd), &self.rpn_anchor_deltas(fwd), &anchors, fwd.image_hw, cfg)
    }

    /// Class logits and box deltas for one ROI: bin votes averaged over the
    /// `k x k` grid.
    pub fn roi_forward(&self, fwd: &Forward, bbox: BBox) -> Result<RoiOutput> {
        let k = self.cfg.pool_size;
        let roi = match &fwd.off_maps {
            Some(om) => {
                let off = self.pool(2).forward(om, &Roi::new(bbox, k))?;
                Roi::with_offsets(bbox, k, off)
            }
            None => Roi::new(bbox, k),
        };
        let cls = self.pool(CLASSES).forward(&fwd.cls_maps, &roi)?;
        let reg = self.pool(4).forward(&fwd.reg_maps, &roi)?;
        let bins = (k * k) as f64;
        let logits = std::array::from_fn(|c| cls.plane(c).iter().sum::<f64>() / bins);
        let deltas = std::array::from_fn(|c| reg.plane(c).iter().sum::<f64>() / bins);
        Ok(RoiOutput { roi, logits, deltas })
    }

    pub fn roi_backward(
        &self,
        fwd: &Forward,
        out: &RoiOutput,
        grad_logits: &[f64; CLASSES],
        grad_deltas: &[f64; 4],
        grads: &mut HeadGrads,
    ) -> Result<()> {
        let k = self.cfg.pool_size;
        let bins = (k * k) as f64;
        let gcls = Tensor::from_fn(&[CLASSES, k, k], |i| grad_logits[i / (k * k)] / bins);
        let greg = Tensor::from_fn(&[4, k, k], |i| grad_deltas[i / (k * k)] / bins);
        let off_a = self.pool(CLASSES).backward_into(&fwd.cls_maps, &out.roi, &gcls, &mut grads.cls_maps)?;
        let off_b = self.pool(4).backward_into(&fwd.reg_maps, &out.roi, &greg, &mut grads.reg_maps)?;
        if let (Some(mut ga), Some(gb), Some(om), Some(gom)) =
            (off_a, off_b, fwd.off_maps.as_ref(), grads.off_maps.as_mut())
        {
            ga.add_assign(&gb)?;
            self.pool(2).backward_into(om, &Roi::new(out.roi.bbox, k), &ga, gom)?;
        }
        Ok(())
    }

    pub fn zero_head_grads(&self, fwd: &Forward) -> HeadGrads {
        HeadGrads {
            rpn_logits: Tensor::zeros(fwd.rpn_logits.shape()),
            rpn_deltas: Tensor::zeros(fwd.rpn_deltas.shape()),
            cls_maps: Tensor::zeros(fwd.cls_maps.shape()),
            reg_maps: Tensor::zeros(fwd.reg_maps.shape()),
            off_maps: fwd.off_maps.as_ref().map(|t| Tensor::zeros(t.shape())),
        }
    }

    /// Parameter gradients for the given head gradients.
    pub fn backward(&self, params: &ModelParams, fwd: &Forward, hg: &HeadGrads) -> Result<ModelParams> {
        let mut grads = params.zeros_like();
        let mut g_hidden = self.rpn_cls.backward(params, &fwd.rpn_hidden, &hg.rpn_logits, &mut grads)?;
        g_hidden.add_assign(&self.rpn_reg.backward(params, &fwd.rpn_hidden, &hg.rpn_deltas, &mut grads)?)?;
        for (g, h) in g_hidden.data_mut().iter_mut().zip(fwd.rpn_hidden.data()) {
            if *h <= 0.0 {
                *g = 0.0;
            }
        }
        let mut g_feats = self.rpn_conv.backward(params, &fwd.feats, &g_hidden, &mut grads)?;
        g_feats.add_assign(&self.cls_maps.backward(params, &fwd.feats, &hg.cls_maps, &mut grads)?)?;
        g_feats.add_assign(&self.reg_maps.backward(params, &fwd.feats, &hg.reg_maps, &mut grads)?)?;
        if let (Some(l), Some(g)) = (&self.off_maps, &hg.off_maps) {
            g_feats.add_assign(&l.backward(params, &fwd.feats, g, &mut grads)?)?;
        }
        self.backbone.backward(params, &fwd.backbone_cache, &g_feats, &mut grads)?;
        Ok(grads)
    }

    /// Scores every proposal with the ROI head.
    pub fn detect(&self, params: &ModelParams, image: &Tensor, cfg: &ProposalConfig) -> Result<Vec<Detection>> {
        let fwd = self.forward(params, image)?;
        let (h, w) = fwd.image_hw;
        let mut dets = Vec::new();
        for p in self.proposals(&fwd, cfg)? {
            let out = self.roi_forward(&fwd, p.bbox)?;
            let probs = softmax(&out.logits);
            let bbox = match decode_box(&p.bbox, &out.deltas) {
                Ok(b) => b.clip(h as f64, w as f64),
                Err(_) => p.bbox,
            };
            dets.push(Detection {
                bbox,
                class_scores: [probs[0], probs[1], probs[2]],
                objectness: p.objectness,
            });
        }
        Ok(dets)
    }
}
