//! Brute-force references shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rfcn_core::detection::iou;
use rfcn_core::ops::conv::ConvParams;
use rfcn_core::{BBox, Tensor};

/// Six nested loops, zero padding.
pub fn conv_nested(x: &Tensor, p: &ConvParams) -> Tensor {
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
                                acc += p.weights.get(&[o, ci, ki, kj]) * x.get(&[ci, iy as usize, ix as usize]);
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

/// Repeatedly takes the best remaining box (lowest index on ties) and
/// removes everything overlapping it by more than `t`.
pub fn nms_reference(boxes: &[BBox], scores: &[f64], t: f64) -> Vec<usize> {
    let mut alive = vec![true; boxes.len()];
    let mut keep = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        keep.push(b);
        alive[b] = false;
        for i in 0..boxes.len() {
            if alive[i] && iou(&boxes[b], &boxes[i]) > t {
                alive[i] = false;
            }
        }
    }
    keep
}

/// Fraction of (positive, negative) pairs ranked correctly, ties one half.
pub fn auc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let p = labels.iter().filter(|&&l| l).count();
    let n = labels.len() - p;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / (p as f64 * n as f64)
}

pub fn random_boxes(n: usize, side: f64, rng: &mut impl Rng) -> Vec<BBox> {
    (0..n)
        .map(|_| {
            let (r, c) = (rng.gen_range(0.0..side), rng.gen_range(0.0..side));
            BBox::new(r, c, r + rng.gen_range(2.0..side / 3.0), c + rng.gen_range(2.0..side / 3.0))
        })
        .collect()
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Scores with many exact ties and both classes present.
pub fn random_ranking(n: usize, rng: &mut impl Rng) -> (Vec<f64>, Vec<bool>) {
    let levels = rng.gen_range(2..12);
    let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
    let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
    labels[0] = true;
    labels[1] = false;
    (scores, labels)
}
