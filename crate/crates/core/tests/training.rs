use rfcn_core::config::ExperimentConfig;
use rfcn_core::detection::FindingClass;
use rfcn_core::model::HeadGrads;
use rfcn_core::phantom::{generate_dataset, normalize_intensity, PhantomSpec};
use rfcn_core::tensor::seeded_rng;
use rfcn_core::trainer::{build_targets, compute_losses, train_epoch, LossWeights, Sgd, TrainConfig, TrainImage, TrainSetup};
use rfcn_core::{DihedralTransform, ModelConfig, Network, ModelParams};

fn small_images(n_exams: usize, prevalence: f64, seed: u64) -> Vec<TrainImage> {
    let spec = PhantomSpec {
        side: 64,
        exams: n_exams,
        prevalence,
        ..PhantomSpec::default()
    };
    let data = generate_dataset(&spec, seed).unwrap();
    data.iter()
        .flat_map(|e| {
            let lut = spec.lut(e.device).unwrap();
            e.images
                .iter()
                .map(move |im| TrainImage {
                    image: normalize_intensity(&im.raw, &lut).unwrap(),
                    findings: im.findings.clone(),
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

fn setup(cfg: TrainConfig) -> TrainSetup {
    let exp = ExperimentConfig {
        train: cfg.clone(),
        ..ExperimentConfig::default()
    };
    TrainSetup {
        cfg,
        targets: exp.targets(),
        transforms: DihedralTransform::all().to_vec(),
    }
}

fn bits(p: &ModelParams) -> Vec<u64> {
    p.iter().flat_map(|e| e.value.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let data = small_images(1, 0.5, 3);
    let (net, mut params) = Network::build(&ModelConfig::default()).unwrap();
    let before = params.clone();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..TrainConfig::default()
    };
    let mut sgd = Sgd::new(&cfg);
    let log = train_epoch(&net, &mut params, &mut sgd, &data, &setup(cfg), 0).unwrap();
    assert_eq!(bits(&params), bits(&before));
    assert_eq!(log.len(), 8 * data.len());
    assert!(log.iter().all(|r| r.loss.total.is_finite() && r.loss.total > 0.0));
    assert_eq!(sgd.steps(), data.len());
}

#[test]
fn epoch_visits_every_variant_once() {
    let data = small_images(1, 0.5, 4);
    let (net, mut params) = Network::build(&ModelConfig::default()).unwrap();
    let cfg = TrainConfig::default();
    let mut sgd = Sgd::new(&cfg);
    let log = train_epoch(&net, &mut params, &mut sgd, &data, &setup(cfg), 0).unwrap();
    let mut seen: Vec<(usize, DihedralTransform)> = log.iter().map(|r| (r.image, r.transform)).collect();
    seen.sort();
    let mut want: Vec<(usize, DihedralTransform)> =
        (0..data.len()).flat_map(|i| DihedralTransform::all().map(|t| (i, t))).collect();
    want.sort();
    assert_eq!(seen, want);
}

#[test]
fn training_is_bit_reproducible() {
    let data = small_images(1, 0.5, 5);
    let run = || {
        let (net, mut params) = Network::build(&ModelConfig::default()).unwrap();
        let cfg = TrainConfig::default();
        let mut sgd = Sgd::new(&cfg);
        let s = setup(cfg);
        let mut losses = Vec::new();
        for epoch in 0..2 {
            losses.extend(train_epoch(&net, &mut params, &mut sgd, &data, &s, epoch).unwrap().iter().map(|r| r.loss.total.to_bits()));
        }
        (bits(&params), losses)
    };
    assert_eq!(run(), run());
}

#[test]
fn single_image_roi_loss_decreases() {
    let data: Vec<TrainImage> = small_images(6, 1.0, 6)
        .into_iter()
        .filter(|t| t.findings.iter().any(|f| f.1 == FindingClass::Malignant))
        .take(1)
        .collect();
    assert_eq!(data.len(), 1);
    let (net, mut params) = Network::build(&ModelConfig::default()).unwrap();
    let cfg = TrainConfig::default();
    let mut sgd = Sgd::new(&cfg);
    let s = setup(cfg);
    let mut per_step = Vec::new();
    for step in 0..50 {
        let log = train_epoch(&net, &mut params, &mut sgd, &data, &s, step).unwrap();
        per_step.push(log.iter().map(|r| r.loss.roi_cls).sum::<f64>() / log.len() as f64);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (first, last) = (mean(&per_step[..10]), mean(&per_step[40..]));
    assert!(last < first, "roi_cls {first:.4} -> {last:.4}");
}

fn head_bits(h: &HeadGrads) -> Vec<u64> {
    [&h.rpn_logits, &h.rpn_deltas, &h.cls_maps, &h.reg_maps]
        .into_iter()
        .chain(h.off_maps.as_ref())
        .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn ohem_drops_unselected_rois() {
    let data = small_images(4, 1.0, 7);
    let sample = data.iter().find(|t| !t.findings.is_empty()).unwrap();
    let (net, params) = Network::build(&ModelConfig::default()).unwrap();
    let fwd = net.forward(&params, &sample.image).unwrap();
    let tc = ExperimentConfig::default().targets();
    let targets = build_targets(&net, &fwd, &sample.findings, &tc, &mut seeded_rng(&[1])).unwrap();
    assert!(targets.rois.len() > 4);
    let w = LossWeights::default();
    let budget = 3;
    let full = compute_losses(&net, &fwd, &targets, budget, &w).unwrap();
    assert_eq!(full.selected.len(), budget);
    // Same losses and gradients when only the selected ROIs exist at all.
    let mut only = targets.clone();
    only.rois = full.selected.iter().map(|&i| targets.rois[i].clone()).collect();
    let kept = compute_losses(&net, &fwd, &only, budget, &w).unwrap();
    assert_eq!(kept.breakdown, full.breakdown);
    assert_eq!(head_bits(&kept.head_grads), head_bits(&full.head_grads));
}
