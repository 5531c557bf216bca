//! Anchors, RPN label assignment, box coding, NMS, proposal generation and
//! online hard example mining.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in continuous pixel coordinates (pixel `i` spans
/// `[i, i + 1)`).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox {
    pub row_min: f64,
    pub col_min: f64,
    pub row_max: f64,
    pub col_max: f64,
}

impl BBox {
    pub const fn new(row_min: f64, col_min: f64, row_max: f64, col_max: f64) -> Self {
        BBox {
            row_min,
            col_min,
            row_max,
            col_max,
        }
    }

    pub fn from_center(row: f64, col: f64, height: f64, width: f64) -> Self {
        BBox::new(row - height / 2.0, col - width / 2.0, row + height / 2.0, col + width / 2.0)
    }

    pub fn height(&self) -> f64 {
        self.row_max - self.row_min
    }

    pub fn width(&self) -> f64 {
        self.col_max - self.col_min
    }

    pub fn area(&self) -> f64 {
        self.height().max(0.0) * self.width().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.row_min + self.row_max),
            0.5 * (self.col_min + self.col_max),
        )
    }

    pub fn is_valid(&self) -> bool {
        self.row_max >= self.row_min && self.col_max >= self.col_min
    }

    pub fn clip(&self, height: f64, width: f64) -> BBox {
        BBox::new(
            self.row_min.clamp(0.0, height),
            self.col_min.clamp(0.0, width),
            self.row_max.clamp(0.0, height),
            self.col_max.clamp(0.0, width),
        )
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ih = (a.row_max.min(b.row_max) - a.row_min.max(b.row_min)).max(0.0);
    let iw = (a.col_max.min(b.col_max) - a.col_min.max(b.col_min)).max(0.0);
    let inter = ih * iw;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// The three output classes; `Negative` doubles as background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FindingClass {
    Negative = 0,
    Benign = 1,
    Malignant = 2,
}

impl FindingClass {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(FindingClass::Negative),
            1 => Some(FindingClass::Benign),
            2 => Some(FindingClass::Malignant),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FindingClass::Negative => "negative",
            FindingClass::Benign => "benign",
            FindingClass::Malignant => "malignant",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "negative" => Some(FindingClass::Negative),
            "benign" => Some(FindingClass::Benign),
            "malignant" => Some(FindingClass::Malignant),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    /// Probabilities indexed by [`FindingClass::index`].
    pub class_scores: [f64; FindingClass::COUNT],
    pub objectness: f64,
}

impl Detection {
    pub fn malignant(&self) -> f64 {
        self.class_scores[FindingClass::Malignant.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub base_scales: Vec<f64>,
    /// Height / width.
    pub aspect_ratios: Vec<f64>,
    /// Input pixels per feature cell.
    pub stride: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            base_scales: vec![8.0, 16.0, 32.0, 64.0],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            stride: 16,
        }
    }
}

impl AnchorConfig {
    pub fn per_location(&self) -> usize {
        self.base_scales.len() * self.aspect_ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.stride > 0
            && !self.base_scales.is_empty()
            && !self.aspect_ratios.is_empty()
            && self.base_scales.iter().chain(&self.aspect_ratios).all(|&v| v > 0.0 && v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("anchor config must be all positive: {self:?}")))
        }
    }
}

/// One anchor per (location, scale, ratio) in that nesting order, centred on
/// the location's cell centre.
pub fn generate_anchors(cfg: &AnchorConfig, feat_h: usize, feat_w: usize) -> Vec<BBox> {
    let s = cfg.stride as f64;
    let mut anchors = Vec::with_capacity(feat_h * feat_w * cfg.per_location());
    for y in 0..feat_h {
        for x in 0..feat_w {
            let (cy, cx) = ((y as f64 + 0.5) * s, (x as f64 + 0.5) * s);
            for &scale in &cfg.base_scales {
                for &ratio in &cfg.aspect_ratios {
                    let r = ratio.sqrt();
                    anchors.push(BBox::from_center(cy, cx, scale * r, scale / r));
                }
            }
        }
    }
    anchors
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RpnLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RpnThresholds {
    pub positive: f64,
    pub negative: f64,
}

impl Default for RpnThresholds {
    fn default() -> Self {
        RpnThresholds {
            positive: 0.5,
            negative: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorAssignment {
    pub labels: Vec<RpnLabel>,
    /// Index of the gt box with the highest IoU, when any gt exists.
    pub matched: Vec<Option<usize>>,
    pub max_iou: Vec<f64>,
}

/// Positive at max IoU >= `positive` or when the anchor is a best match of
/// some gt box, negative below `negative`, ignored otherwise.
pub fn assign_rpn_labels(anchors: &[BBox], gt: &[BBox], th: RpnThresholds) -> AnchorAssignment {
    let n = anchors.len();
    let mut max_iou = vec![0.0; n];
    let mut matched = vec![None; n];
    let mut gt_best = vec![0.0f64; gt.len()];
    let mut overlaps = vec![0.0; n * gt.len()];
    for (a, anchor) in anchors.iter().enumerate() {
        for (g, b) in gt.iter().enumerate() {
            let v = iou(anchor, b);
            overlaps[a * gt.len() + g] = v;
            if matched[a].is_none() || v > max_iou[a] {
                max_iou[a] = v;
                matched[a] = Some(g);
            }
            gt_best[g] = gt_best[g].max(v);
        }
    }
    let mut labels: Vec<RpnLabel> = max_iou
        .iter()
        .map(|&v| {
            if v >= th.positive {
                RpnLabel::Positive
            } else if v < th.negative {
                RpnLabel::Negative
            } else {
                RpnLabel::Ignore
            }
        })
        .collect();
    for (g, &best) in gt_best.iter().enumerate() {
        if best <= 0.0 {
            continue;
        }
        for a in 0..n {
            if overlaps[a * gt.len() + g] == best {
                labels[a] = RpnLabel::Positive;
            }
        }
    }
    AnchorAssignment {
        labels,
        matched,
        max_iou,
    }
}

/// Regression targets `(d_row, d_col, d_height, d_width)`: centre shift in
/// units of anchor size and log size ratios.
pub fn encode_box(anchor: &BBox, gt: &BBox) -> Result<[f64; 4]> {
    check_anchor(anchor)?;
    let (ah, aw) = (anchor.height(), anchor.width());
    let (ay, ax) = anchor.center();
    let (gy, gx) = gt.center();
    Ok([
        (gy - ay) / ah,
        (gx - ax) / aw,
        (gt.height() / ah).ln(),
        (gt.width() / aw).ln(),
    ])
}

pub fn decode_box(anchor: &BBox, deltas: &[f64; 4]) -> Result<BBox> {
    check_anchor(anchor)?;
    let (ah, aw) = (anchor.height(), anchor.width());
    let (ay, ax) = anchor.center();
    Ok(BBox::from_center(
        ay + deltas[0] * ah,
        ax + deltas[1] * aw,
        ah * deltas[2].exp(),
        aw * deltas[3].exp(),
    ))
}

fn check_anchor(anchor: &BBox) -> Result<()> {
    if anchor.height() > 0.0 && anchor.width() > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("degenerate anchor {anchor:?}")))
    }
}

/// Indices sorted by descending score; equal scores keep ascending index.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; a box is dropped when its IoU with an already kept box exceeds
/// `iou_threshold`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: one score per box");
    let mut kept: Vec<usize> = Vec::new();
    for i in rank_desc(scores) {
        if kept.iter().all(|&j| iou(&boxes[i], &boxes[j]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    pub pre_nms_top_n: usize,
    pub post_nms_top_n: usize,
    pub nms_iou: f64,
    /// Boxes with a side shorter than this (pixels) are dropped.
    pub min_size: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            pre_nms_top_n: 2000,
            post_nms_top_n: 64,
            nms_iou: 0.1,
            min_size: 4.0,
        }
    }
}

/// Log-size deltas are clamped here before decoding to keep `exp` finite.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
    pub anchor: usize,
}

/// Decode, clip, size-filter, take the top `pre_nms_top_n`, suppress, and
/// keep the top `post_nms_top_n`.
pub fn propose(
    objectness: &[f64],
    deltas: &[[f64; 4]],
    anchors: &[BBox],
    image_hw: (usize, usize),
    cfg: &ProposalConfig,
) -> Result<Vec<Proposal>> {
    if objectness.len() != anchors.len() || deltas.len() != anchors.len() {
        return Err(Error::invalid(format!(
            "propose: {} anchors, {} scores, {} deltas",
            anchors.len(),
            objectness.len(),
            deltas.len()
        )));
    }
    let (h, w) = (image_hw.0 as f64, image_hw.1 as f64);
    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    let mut source = Vec::new();
    for (a, anchor) in anchors.iter().enumerate() {
        let mut d = deltas[a];
        d[2] = d[2].min(MAX_LOG_SCALE);
        d[3] = d[3].min(MAX_LOG_SCALE);
        let b = decode_box(anchor, &d)?.clip(h, w);
        if b.height() >= cfg.min_size && b.width() >= cfg.min_size {
            boxes.push(b);
            scores.push(objectness[a]);
            source.push(a);
        }
    }
    let mut top = rank_desc(&scores);
    top.truncate(cfg.pre_nms_top_n);
    let top_boxes: Vec<BBox> = top.iter().map(|&i| boxes[i]).collect();
    let top_scores: Vec<f64> = top.iter().map(|&i| scores[i]).collect();
    let mut keep = nms(&top_boxes, &top_scores, cfg.nms_iou);
    keep.truncate(cfg.post_nms_top_n);
    Ok(keep
        .into_iter()
        .map(|i| Proposal {
            bbox: top_boxes[i],
            objectness: top_scores[i],
            anchor: source[top[i]],
        })
        .collect())
}

/// IoU above which two ROIs count as duplicates for hard example mining.
pub const OHEM_DEDUP_IOU: f64 = 0.7;

/// The `budget` highest-loss ROIs after suppressing near-duplicates, in
/// descending loss order.
pub fn ohem_select(losses: &[f64], rois: &[BBox], budget: usize) -> Vec<usize> {
    let mut keep = nms(rois, losses, OHEM_DEDUP_IOU);
    keep.truncate(budget.max(1));
    keep
}
