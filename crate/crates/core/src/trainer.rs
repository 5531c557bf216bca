//! Losses, momentum SGD and the per-image training loop.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::{
    assign_rpn_labels, encode_box, iou, ohem_select, BBox, FindingClass, ProposalConfig, RpnLabel, RpnThresholds,
};
use crate::error::{Error, Result};
use crate::inference::DihedralTransform;
use crate::model::{Forward, HeadGrads, Network};
use crate::params::{ModelParams, ParamKind};
use crate::tensor::{seeded_rng, softmax, Tensor};

/// Cross entropy of `logits` against `label`, with its gradient
/// `softmax - one_hot`.
pub fn softmax_xent(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(Error::invalid("softmax cross entropy needs at least two classes"));
    }
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((lse - logits[label], grad))
}

/// Summed smooth-L1 loss: `0.5 d^2` for `|d| < 1`, else `|d| - 0.5`.
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(pred.len(), target.len(), "smooth_l1: length mismatch");
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            if d.abs() < 1.0 {
                loss += 0.5 * d * d;
                d
            } else {
                loss += d.abs() - 0.5;
                d.signum()
            }
        })
        .collect();
    (loss, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rpn_cls: 1.0,
            rpn_reg: 1.0,
            roi_cls: 1.0,
            roi_reg: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub ohem_budget: usize,
    pub seed: u64,
    /// Anchors sampled per image for the RPN loss, at most half positive.
    pub rpn_batch: usize,
    /// ROI IoU at or above which a proposal takes its gt class.
    pub roi_fg_iou: f64,
    /// Images run in moving-average normalization mode before training.
    pub norm_warmup_images: usize,
    /// Train on images without findings as well.
    pub include_normals: bool,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 2,
            ohem_budget: 16,
            seed: 1234,
            rpn_batch: 64,
            roi_fg_iou: 0.5,
            norm_warmup_images: 40,
            include_normals: true,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.ohem_budget == 0 || self.rpn_batch == 0 {
            return Err(Error::Config("ohem_budget and rpn_batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// Momentum SGD with L2 weight decay:
/// `v = momentum * v + (g + decay * w)`, `w -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<ModelParams>,
    steps: usize,
}

impl Sgd {
    pub fn new(cfg: &TrainConfig) -> Self {
        Sgd {
            learning_rate: cfg.learning_rate,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: None,
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        params.check_layout(grads)?;
        for e in grads.iter() {
            if e.kind == ParamKind::Trainable && e.value.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: e.name.clone(),
                    step: self.steps,
                });
            }
        }
        let velocity = self.velocity.get_or_insert_with(|| params.zeros_like());
        for ((p, g), v) in params
            .entries_mut()
            .iter_mut()
            .zip(grads.entries())
            .zip(velocity.entries_mut())
        {
            if p.kind != ParamKind::Trainable {
                continue;
            }
            let (pd, gd, vd) = (p.value.data_mut(), g.value.data(), v.value.data_mut());
            for i in 0..pd.len() {
                vd[i] = self.momentum * vd[i] + gd[i] + self.weight_decay * pd[i];
                pd[i] -= self.learning_rate * vd[i];
            }
        }
        self.steps += 1;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainImage {
    /// `[1, H, W]`, normalized intensities.
    pub image: Tensor,
    pub findings: Vec<(BBox, FindingClass)>,
}

impl TrainImage {
    pub fn transformed(&self, t: DihedralTransform) -> TrainImage {
        let (_, h, w) = self.image.dims3().expect("training images are feature maps");
        TrainImage {
            image: t.apply(&self.image),
            findings: self.findings.iter().map(|&(b, c)| (t.transform_box(&b, h, w), c)).collect(),
        }
    }
}

/// Fixed supervision for one forward pass: sampled anchors and the ROI set
/// with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTargets {
    /// `(anchor index, positive?, regression target for positives)`
    pub anchors: Vec<(usize, bool, Option<[f64; 4]>)>,
    pub rois: Vec<RoiTarget>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiTarget {
    pub bbox: BBox,
    pub class: FindingClass,
    pub deltas: Option<[f64; 4]>,
}

/// Hyperparameters that shape the targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetConfig {
    pub rpn: RpnThresholds,
    pub proposals: ProposalConfig,
    pub rpn_batch: usize,
    pub roi_fg_iou: f64,
}

pub fn build_targets(
    net: &Network,
    fwd: &Forward,
    findings: &[(BBox, FindingClass)],
    cfg: &TargetConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepTargets> {
    let anchors = net.anchors(fwd.feat_hw.0, fwd.feat_hw.1);
    let gt: Vec<BBox> = findings.iter().map(|f| f.0).collect();
    let asg = assign_rpn_labels(&anchors, &gt, cfg.rpn);
    let mut pos: Vec<usize> = (0..anchors.len()).filter(|&a| asg.labels[a] == RpnLabel::Positive).collect();
    let mut neg: Vec<usize> = (0..anchors.len()).filter(|&a| asg.labels[a] == RpnLabel::Negative).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(cfg.rpn_batch / 2);
    neg.truncate(cfg.rpn_batch - pos.len());
    let mut sampled = Vec::with_capacity(pos.len() + neg.len());
    for a in pos {
        let g = asg.matched[a].expect("positives have a match");
        sampled.push((a, true, Some(encode_box(&anchors[a], &gt[g])?)));
    }
    sampled.extend(neg.into_iter().map(|a| (a, false, None)));
    sampled.sort_by_key(|s| s.0);

    let mut boxes: Vec<BBox> = net.proposals(fwd, &cfg.proposals)?.into_iter().map(|p| p.bbox).collect();
    boxes.extend(gt.iter().copied().filter(|b| b.height() > 0.0 && b.width() > 0.0));
    let rois = boxes
        .into_iter()
        .map(|b| {
            let best = gt
                .iter()
                .enumerate()
                .map(|(i, g)| (i, iou(&b, g)))
                .fold(None, |acc: Option<(usize, f64)>, x| match acc {
                    Some(a) if a.1 >= x.1 => Some(a),
                    _ => Some(x),
                });
            match best {
                Some((i, v)) if v >= cfg.roi_fg_iou => Ok(RoiTarget {
                    bbox: b,
                    class: findings[i].1,
                    deltas: Some(encode_box(&b, &gt[i])?),
                }),
                _ => Ok(RoiTarget {
                    bbox: b,
                    class: FindingClass::Negative,
                    deltas: None,
                }),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StepTargets { anchors: sampled, rois })
}

#[derive(Debug, Clone)]
pub struct LossResult {
    pub breakdown: LossBreakdown,
    pub head_grads: HeadGrads,
    /// ROI indices chosen by hard example mining; all others get no gradient.
    pub selected: Vec<usize>,
}

/// Losses of one forward pass against fixed targets, and the gradients w.r.t.
/// the head outputs.
pub fn compute_losses(
    net: &Network,
    fwd: &Forward,
    targets: &StepTargets,
    ohem_budget: usize,
    weights: &LossWeights,
) -> Result<LossResult> {
    let mut hg = net.zero_head_grads(fwd);
    let logits = net.rpn_anchor_logits(fwd);
    let deltas = net.rpn_anchor_deltas(fwd);
    let n = targets.anchors.len().max(1) as f64;
    let (mut rpn_cls, mut rpn_reg) = (0.0, 0.0);
    let mut g_logits = Vec::with_capacity(targets.anchors.len());
    let mut g_deltas = Vec::new();
    for &(a, positive, target) in &targets.anchors {
        let (l, g) = softmax_xent(&logits[a], usize::from(positive))?;
        rpn_cls += l / n;
        g_logits.push((a, [weights.rpn_cls * g[0] / n, weights.rpn_cls * g[1] / n]));
        if let Some(t) = target {
            let (l, g) = smooth_l1(&deltas[a], &t);
            rpn_reg += l / n;
            g_deltas.push((a, std::array::from_fn(|j| weights.rpn_reg * g[j] / n)));
        }
    }
    net.rpn_logit_grad(fwd, &g_logits, &mut hg.rpn_logits);
    net.rpn_delta_grad(fwd, &g_deltas, &mut hg.rpn_deltas);

    let mut outs = Vec::with_capacity(targets.rois.len());
    let mut per_roi = Vec::with_capacity(targets.rois.len());
    for t in &targets.rois {
        let out = net.roi_forward(fwd, t.bbox)?;
        let (lc, gc) = softmax_xent(&out.logits, t.class.index())?;
        let (lr, gr) = match t.deltas {
            Some(d) => smooth_l1(&out.deltas, &d),
            None => (0.0, vec![0.0; 4]),
        };
        per_roi.push((lc, gc, lr, gr));
        outs.push(out);
    }
    let losses: Vec<f64> = per_roi.iter().map(|r| r.0 + r.2).collect();
    let boxes: Vec<BBox> = targets.rois.iter().map(|t| t.bbox).collect();
    let selected = if boxes.is_empty() {
        Vec::new()
    } else {
        ohem_select(&losses, &boxes, ohem_budget)
    };
    let m = selected.len().max(1) as f64;
    let (mut roi_cls, mut roi_reg) = (0.0, 0.0);
    for &i in &selected {
        let (lc, gc, lr, gr) = &per_roi[i];
        roi_cls += lc / m;
        roi_reg += lr / m;
        let gl = std::array::from_fn(|c| weights.roi_cls * gc[c] / m);
        let gd = std::array::from_fn(|j| weights.roi_reg * gr[j] / m);
        net.roi_backward(fwd, &outs[i], &gl, &gd, &mut hg)?;
    }
    let total = weights.rpn_cls * rpn_cls + weights.rpn_reg * rpn_reg + weights.roi_cls * roi_cls + weights.roi_reg * roi_reg;
    Ok(LossResult {
        breakdown: LossBreakdown {
            rpn_cls,
            rpn_reg,
            roi_cls,
            roi_reg,
            total,
        },
        head_grads: hg,
        selected,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub image: usize,
    pub transform: DihedralTransform,
    pub loss: LossBreakdown,
}

/// Everything `train_epoch` needs besides the network and data.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub cfg: TrainConfig,
    pub targets: TargetConfig,
    /// Variants per image; the full dihedral orbit by default.
    pub transforms: Vec<DihedralTransform>,
}


/// Forward, target assignment, losses and parameter gradients for one
/// augmented view.
pub fn variant_gradients(
    net: &Network,
    params: &ModelParams,
    sample: &TrainImage,
    setup: &TrainSetup,
    seed: &[u64],
) -> Result<(LossBreakdown, ModelParams)> {
    let fwd = net.forward(params, &sample.image)?;
    let mut rng = seeded_rng(seed);
    let targets = build_targets(net, &fwd, &sample.findings, &setup.targets, &mut rng)?;
    let res = compute_losses(net, &fwd, &targets, setup.cfg.ohem_budget, &setup.cfg.loss_weights)?;
    let grads = net.backward(params, &fwd, &res.head_grads)?;
    Ok((res.breakdown, grads))
}

/// Runs the moving-average normalization warm-up over the first images,
/// after which statistics stay frozen.
pub fn warm_up_normalization(net: &Network, params: &mut ModelParams, images: &[TrainImage], count: usize) -> Result<()> {
    for s in images.iter().take(count) {
        let (_, up) = net.backbone.forward_warm(params, &s.image)?;
        up.apply(params);
    }
    Ok(())
}

/// One pass over `data` in a seeded random order: each step takes one image,
/// runs all of its augmented variants, averages their gradients and applies
/// one SGD update.
pub fn train_epoch(
    net: &Network,
    params: &mut ModelParams,
    sgd: &mut Sgd,
    data: &[TrainImage],
    setup: &TrainSetup,
    epoch: usize,
) -> Result<Vec<LossRecord>> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut log = Vec::with_capacity(data.len() * setup.transforms.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seeded_rng(&[setup.cfg.seed, epoch as u64, u64::MAX]));
    for i in order {
        let sample = &data[i];
        let results: Vec<Result<(LossBreakdown, ModelParams)>> = setup
            .transforms
            .par_iter()
            .enumerate()
            .map(|(v, &t)| {
                let variant = sample.transformed(t);
                variant_gradients(net, params, &variant, setup, &[setup.cfg.seed, epoch as u64, i as u64, v as u64])
            })
            .collect();
        let mut total: Option<ModelParams> = None;
        let scale = 1.0 / setup.transforms.len() as f64;
        for (r, &t) in results.into_iter().zip(&setup.transforms) {
            let (loss, g) = r?;
            log.push(LossRecord {
                epoch,
                image: i,
                transform: t,
                loss,
            });
            match total.as_mut() {
                None => {
                    let mut acc = params.zeros_like();
                    acc.accumulate(&g, scale)?;
                    total = Some(acc);
                }
                Some(acc) => acc.accumulate(&g, scale)?,
            }
        }
        sgd.step(params, total.as_ref().expect("at least one variant"))?;
    }
    Ok(log)
}
