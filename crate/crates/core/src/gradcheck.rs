//! Central finite-difference checks of every analytic gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{cbr_backward, cbr_forward, BlockKind, BlockSpec, NormState};
use crate::detection::{BBox, FindingClass};
use crate::error::Result;
use crate::model::{ModelConfig, Network};
use crate::ops::conv::ConvParams;
use crate::ops::deform::{deform_conv_backward, deform_conv_forward, OffsetField};
use crate::ops::psroi::{PsRoiPool, Roi};
use crate::params::{ModelParams, ParamKind};
use crate::tensor::{bilinear_sample, bilinear_sample_grad, seeded_rng, Point2, Tensor};
use crate::trainer::{compute_losses, smooth_l1, softmax_xent, LossWeights, RoiTarget, StepTargets};

pub const FD_STEP: f64 = 1e-6;
/// Tolerance for single operators.
pub const OPERATOR_TOLERANCE: f64 = 1e-5;
/// Tolerance for the composed miniature model.
pub const MODEL_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so that components that are
/// zero up to rounding do not dominate.
pub const REL_ERR_FLOOR: f64 = 1e-4;
/// Coordinates checked per tensor.
const SAMPLES: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Largest relative error between `analytic` and central differences of `f`
/// over a random subset of coordinates of `x0`.
fn fd_max_err(x0: &[f64], analytic: &[f64], rng: &mut ChaCha8Rng, mut f: impl FnMut(&[f64]) -> f64) -> (f64, usize) {
    assert_eq!(x0.len(), analytic.len());
    let idx: Vec<usize> = if x0.len() <= SAMPLES {
        (0..x0.len()).collect()
    } else {
        (0..SAMPLES).map(|_| rng.gen_range(0..x0.len())).collect()
    };
    let mut x = x0.to_vec();
    let mut worst = 0.0f64;
    for &i in &idx {
        x[i] = x0[i] + FD_STEP;
        let fp = f(&x);
        x[i] = x0[i] - FD_STEP;
        let fm = f(&x);
        x[i] = x0[i];
        worst = worst.max(rel_err(analytic[i], (fp - fm) / (2.0 * FD_STEP)));
    }
    (worst, idx.len())
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn with_data(t: &Tensor, data: &[f64]) -> Tensor {
    Tensor::new(t.shape().to_vec(), data.to_vec()).expect("same size")
}

/// Fractional part kept within `[0.2, 0.8]` so bilinear sampling stays
/// away from its kinks at integer coordinates.
fn off_grid(rng: &mut ChaCha8Rng, lo: i32, hi: i32) -> f64 {
    rng.gen_range(lo..hi) as f64 + rng.gen_range(0.2..0.8)
}

struct Suite {
    rng: ChaCha8Rng,
    out: Vec<GradCheck>,
}

impl Suite {
    fn record(&mut self, name: &str, tolerance: f64, parts: &[(f64, usize)]) {
        self.out.push(GradCheck {
            name: name.to_string(),
            max_rel_err: parts.iter().map(|p| p.0).fold(0.0, f64::max),
            tolerance,
            checked: parts.iter().map(|p| p.1).sum(),
        });
    }

    fn bilinear(&mut self) -> Result<()> {
        let x = random_tensor(&[5, 6], -1.0, 1.0, &mut self.rng);
        let mut parts = Vec::new();
        for _ in 0..8 {
            let p = Point2::new(off_grid(&mut self.rng, -1, 5), off_grid(&mut self.rng, -1, 6));
            let up = self.rng.gen_range(0.5..1.5);
            let g = bilinear_sample_grad(&x, p, up)?;
            let mut gx = vec![0.0; x.len()];
            for ((r, c), v) in &g.grad_x {
                gx[r * 6 + c] += v;
            }
            parts.push(fd_max_err(x.data(), &gx, &mut self.rng, |d| {
                up * bilinear_sample(&with_data(&x, d), p).expect("valid")
            }));
            parts.push(fd_max_err(&[p.row, p.col], &[g.grad_p.row, g.grad_p.col], &mut self.rng, |q| {
                up * bilinear_sample(&x, Point2::new(q[0], q[1])).expect("valid")
            }));
        }
        self.record("bilinear_sample", OPERATOR_TOLERANCE, &parts);
        Ok(())
    }

    fn deform_conv(&mut self) -> Result<()> {
        let (c, h, w, cout, k) = (2, 6, 7, 3, 3);
        let x = random_tensor(&[c, h, w], -1.0, 1.0, &mut self.rng);
        let wt = random_tensor(&[cout, c, k, k], -0.5, 0.5, &mut self.rng);
        let b = random_tensor(&[cout], -0.1, 0.1, &mut self.rng);
        let conv = ConvParams::new(wt.clone(), b.clone(), 1, 1)?;
        let off = Tensor::from_fn(&[2 * k * k, h, w], |_| off_grid(&mut self.rng, -1, 1));
        let field = OffsetField::new(off.clone())?;
        let y = deform_conv_forward(&x, &conv, &field)?;
        let r = random_tensor(y.shape(), -1.0, 1.0, &mut self.rng);
        let g = deform_conv_backward(&x, &conv, &field, &r)?;
        let loss = |x: &Tensor, conv: &ConvParams, off: &Tensor| {
            dot(&r, &deform_conv_forward(x, conv, &OffsetField::new(off.clone()).expect("even")).expect("valid"))
        };
        let ex = fd_max_err(x.data(), g.x.data(), &mut self.rng, |d| loss(&with_data(&x, d), &conv, &off));
        let ew = fd_max_err(wt.data(), g.weights.data(), &mut self.rng, |d| {
            let cv = ConvParams::new(with_data(&wt, d), b.clone(), 1, 1).expect("valid");
            loss(&x, &cv, &off)
        });
        let eb = fd_max_err(b.data(), g.bias.data(), &mut self.rng, |d| {
            let cv = ConvParams::new(wt.clone(), with_data(&b, d), 1, 1).expect("valid");
            loss(&x, &cv, &off)
        });
        let eo = fd_max_err(off.data(), g.offsets.data(), &mut self.rng, |d| loss(&x, &conv, &with_data(&off, d)));
        self.record("deform_conv.input", OPERATOR_TOLERANCE, &[ex]);
        self.record("deform_conv.weights", OPERATOR_TOLERANCE, &[ew, eb]);
        self.record("deform_conv.offsets", OPERATOR_TOLERANCE, &[eo]);
        Ok(())
    }

    fn dps_roi(&mut self) -> Result<()> {
        let (k, classes, h, w) = (3, 2, 9, 10);
        let maps = random_tensor(&[k * k * classes, h, w], -1.0, 1.0, &mut self.rng);
        let pool = PsRoiPool::new(classes, 0.5);
        let (mut em, mut eo) = (Vec::new(), Vec::new());
        for _ in 0..4 {
            let r0 = self.rng.gen_range(0.0..6.0);
            let c0 = self.rng.gen_range(0.0..6.0);
            let bbox = BBox::new(r0, c0, r0 + self.rng.gen_range(6.0..12.0), c0 + self.rng.gen_range(6.0..12.0));
            let off = random_tensor(&[2, k, k], -0.6, 0.6, &mut self.rng);
            let roi = Roi::with_offsets(bbox, k, off.clone());
            let up = random_tensor(&[classes, k, k], -1.0, 1.0, &mut self.rng);
            let g = pool.backward(&maps, &roi, &up)?;
            em.push(fd_max_err(maps.data(), g.score_maps.data(), &mut self.rng, |d| {
                dot(&up, &pool.forward(&with_data(&maps, d), &roi).expect("valid"))
            }));
            let go = g.offsets.expect("deformable roi");
            eo.push(fd_max_err(off.data(), go.data(), &mut self.rng, |d| {
                let roi = Roi::with_offsets(bbox, k, with_data(&off, d));
                dot(&up, &pool.forward(&maps, &roi).expect("valid"))
            }));
        }
        self.record("dps_roi_pool.maps", OPERATOR_TOLERANCE, &em);
        self.record("dps_roi_pool.offsets", OPERATOR_TOLERANCE, &eo);
        Ok(())
    }

    fn cbr(&mut self) -> Result<()> {
        let (c, h, w, cout) = (3, 6, 6, 4);
        let x = random_tensor(&[c, h, w], -1.0, 1.0, &mut self.rng);
        let wt = random_tensor(&[cout, c, 3, 3], -0.4, 0.4, &mut self.rng);
        let b = random_tensor(&[cout], -0.1, 0.1, &mut self.rng);
        let mut norm = NormState::identity(cout);
        for ch in 0..cout {
            norm.scale[ch] = self.rng.gen_range(0.5..1.5);
            norm.shift[ch] = self.rng.gen_range(-0.2..0.4);
            norm.running_mean[ch] = self.rng.gen_range(-0.2..0.2);
            norm.running_var[ch] = self.rng.gen_range(0.5..2.0);
        }
        let conv = ConvParams::centered(wt.clone(), b.clone(), 1)?;
        let y = cbr_forward(&x, &conv, &norm)?;
        let r = random_tensor(y.shape(), -1.0, 1.0, &mut self.rng);
        let g = cbr_backward(&x, &conv, &norm, &r)?;
        let loss = |x: &Tensor, conv: &ConvParams, n: &NormState| dot(&r, &cbr_forward(x, conv, n).expect("valid"));
        let ex = fd_max_err(x.data(), g.x.data(), &mut self.rng, |d| loss(&with_data(&x, d), &conv, &norm));
        let ew = fd_max_err(wt.data(), g.weights.data(), &mut self.rng, |d| {
            loss(&x, &ConvParams::centered(with_data(&wt, d), b.clone(), 1).expect("valid"), &norm)
        });
        let eb = fd_max_err(b.data(), g.bias.data(), &mut self.rng, |d| {
            loss(&x, &ConvParams::centered(wt.clone(), with_data(&b, d), 1).expect("valid"), &norm)
        });
        let es = fd_max_err(&norm.scale, &g.scale, &mut self.rng, |d| {
            let mut n = norm.clone();
            n.scale = d.to_vec();
            loss(&x, &conv, &n)
        });
        let et = fd_max_err(&norm.shift, &g.shift, &mut self.rng, |d| {
            let mut n = norm.clone();
            n.shift = d.to_vec();
            loss(&x, &conv, &n)
        });
        self.record("cbr", OPERATOR_TOLERANCE, &[ex, ew, eb, es, et]);
        Ok(())
    }

    fn losses(&mut self) -> Result<()> {
        let mut parts = Vec::new();
        for _ in 0..8 {
            let logits: Vec<f64> = (0..3).map(|_| self.rng.gen_range(-3.0..3.0)).collect();
            let label = self.rng.gen_range(0..3);
            let (_, g) = softmax_xent(&logits, label)?;
            parts.push(fd_max_err(&logits, &g, &mut self.rng, |l| softmax_xent(l, label).expect("valid").0));
        }
        self.record("softmax_xent", OPERATOR_TOLERANCE, &parts);
        let mut parts = Vec::new();
        for _ in 0..8 {
            let target: Vec<f64> = (0..4).map(|_| self.rng.gen_range(-1.0..1.0)).collect();
            let pred: Vec<f64> = target
                .iter()
                .map(|t| {
                    let d = self.rng.gen_range(0.1..2.5);
                    let d = if (d - 1.0f64).abs() < 0.05 { d + 0.2 } else { d };
                    t + if self.rng.gen_bool(0.5) { d } else { -d }
                })
                .collect();
            let (_, g) = smooth_l1(&pred, &target);
            parts.push(fd_max_err(&pred, &g, &mut self.rng, |p| smooth_l1(p, &target).0));
        }
        self.record("smooth_l1", OPERATOR_TOLERANCE, &parts);
        Ok(())
    }

    fn miniature_model(&mut self) -> Result<()> {
        let (net, mut params) = miniature_network()?;
        for e in params.entries_mut() {
            if e.kind == ParamKind::Trainable && (e.name.contains("offset") || e.name == "roi.offset_maps.weight") {
                let n = e.value.len();
                let d: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-0.3..0.3)).collect();
                e.value = with_data(&e.value, &d);
            }
        }
        let image = random_tensor(&[1, 8, 8], 0.0, 1.0, &mut self.rng);
        let targets = miniature_targets();
        let weights = LossWeights::default();
        let total = |p: &ModelParams| -> f64 {
            let fwd = net.forward(p, &image).expect("valid");
            compute_losses(&net, &fwd, &targets, 16, &weights).expect("valid").breakdown.total
        };
        let fwd = net.forward(&params, &image)?;
        let res = compute_losses(&net, &fwd, &targets, 16, &weights)?;
        let grads = net.backward(&params, &fwd, &res.head_grads)?;
        let mut checks = Vec::new();
        for (i, e) in params.entries().iter().enumerate() {
            if e.kind != ParamKind::Trainable {
                continue;
            }
            let x0 = e.value.data().to_vec();
            let ga = grads.entries()[i].value.data().to_vec();
            let mut probe = params.clone();
            let err = fd_max_err(&x0, &ga, &mut self.rng, |d| {
                probe.entries_mut()[i].value.data_mut().copy_from_slice(d);
                total(&probe)
            });
            checks.push(err);
        }
        self.record("model.end_to_end", MODEL_TOLERANCE, &checks);
        Ok(())
    }
}

/// One BlockC with a deformable 3x3 unit on an 8x8 input, k = 3 pooling.
pub fn miniature_config() -> ModelConfig {
    ModelConfig {
        blocks: vec![BlockSpec::new(BlockKind::BlockC, 1, 8, false)],
        anchor_scales: vec![4.0, 6.0],
        anchor_ratios: vec![1.0],
        pool_size: 3,
        rpn_channels: 4,
        ..ModelConfig::default()
    }
}

pub fn miniature_network() -> Result<(Network, ModelParams)> {
    Network::build(&miniature_config())
}

/// Fixed supervision: six sampled anchors and two ROIs, one foreground.
pub fn miniature_targets() -> StepTargets {
    StepTargets {
        anchors: vec![
            (3, true, Some([0.1, -0.2, 0.05, 0.3])),
            (10, false, None),
            (17, true, Some([-0.3, 0.2, -0.15, 0.1])),
            (40, false, None),
            (77, false, None),
            (101, false, None),
        ],
        rois: vec![
            RoiTarget {
                bbox: BBox::new(0.7, 1.3, 5.4, 6.1),
                class: FindingClass::Malignant,
                deltas: Some([0.05, -0.1, 0.2, -0.05]),
            },
            RoiTarget {
                bbox: BBox::new(3.6, 0.4, 7.7, 3.9),
                class: FindingClass::Negative,
                deltas: None,
            },
        ],
    }
}

/// Runs every check with a fixed seed.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut s = Suite {
        rng: seeded_rng(&[seed, 0x6772_6164]),
        out: Vec::new(),
    };
    s.bilinear()?;
    s.deform_conv()?;
    s.dps_roi()?;
    s.cbr()?;
    s.losses()?;
    s.miniature_model()?;
    Ok(s.out)
}
