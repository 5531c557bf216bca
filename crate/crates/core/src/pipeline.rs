//! Glue for complete runs: phantom data to trained weights to scores to AUC.

use std::time::Instant;

use crate::config::ExperimentConfig;
use crate::data_io::encode_weights;
use crate::error::Result;
use crate::evaluation::{auc, breastwise_rows, roc_curve, subjectwise_rows, RocCurve};
use crate::inference::{
    aggregate_subject, build_score_table, image_score_with, DihedralTransform, ImageId, ScoreTable, VariantRule,
};
use crate::model::Network;
use crate::params::ModelParams;
use crate::phantom::{generate_dataset, normalize_intensity, PhantomExam};
use crate::tensor::Tensor;
use crate::trainer::{train_epoch, warm_up_normalization, LossBreakdown, LossRecord, Sgd, TrainImage, TrainSetup};

/// LUT-normalized training samples. Images without findings are kept only
/// when `include_normals` is set.
pub fn training_images(cfg: &ExperimentConfig, exams: &[PhantomExam]) -> Result<Vec<TrainImage>> {
    let spec = cfg.data.phantom(0);
    let mut out = Vec::new();
    for e in exams {
        let lut = spec.lut(e.device)?;
        for im in &e.images {
            if im.findings.is_empty() && !cfg.train.include_normals {
                continue;
            }
            out.push(TrainImage {
                image: normalize_intensity(&im.raw, &lut)?,
                findings: im.findings.clone(),
            });
        }
    }
    Ok(out)
}

pub fn normalized_images(cfg: &ExperimentConfig, exams: &[PhantomExam]) -> Result<Vec<(ImageId, Tensor)>> {
    let spec = cfg.data.phantom(0);
    let mut out = Vec::new();
    for e in exams {
        let lut = spec.lut(e.device)?;
        for im in &e.images {
            out.push((im.id.clone(), normalize_intensity(&im.raw, &lut)?));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub variants: usize,
    pub mean: LossBreakdown,
    pub seconds: f64,
}

pub fn summarize(epoch: usize, log: &[LossRecord], seconds: f64) -> EpochSummary {
    let n = log.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for r in log {
        m.rpn_cls += r.loss.rpn_cls / n;
        m.rpn_reg += r.loss.rpn_reg / n;
        m.roi_cls += r.loss.roi_cls / n;
        m.roi_reg += r.loss.roi_reg / n;
        m.total += r.loss.total / n;
    }
    EpochSummary {
        epoch,
        variants: log.len(),
        mean: m,
        seconds,
    }
}

/// Builds a fresh network and trains it for `cfg.train.epochs` epochs.
pub fn train_model(
    cfg: &ExperimentConfig,
    data: &[TrainImage],
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<(Network, ModelParams)> {
    let (net, mut params) = Network::build(&cfg.model)?;
    warm_up_normalization(&net, &mut params, data, cfg.train.norm_warmup_images)?;
    let setup = TrainSetup {
        cfg: cfg.train.clone(),
        targets: cfg.targets(),
        transforms: DihedralTransform::all().to_vec(),
    };
    let mut sgd = Sgd::new(&cfg.train);
    for epoch in 0..cfg.train.epochs {
        let t = Instant::now();
        let log = train_epoch(&net, &mut params, &mut sgd, data, &setup, epoch)?;
        on_epoch(&summarize(epoch, &log, t.elapsed().as_secs_f64()));
    }
    Ok((net, params))
}

pub fn inference_transforms(augment: bool) -> Vec<DihedralTransform> {
    if augment {
        DihedralTransform::all().to_vec()
    } else {
        vec![DihedralTransform::IDENTITY]
    }
}

pub fn score_images(
    cfg: &ExperimentConfig,
    net: &Network,
    params: &ModelParams,
    images: &[(ImageId, Tensor)],
    transforms: &[DihedralTransform],
) -> Result<ScoreTable> {
    let refs: Vec<(ImageId, &Tensor)> = images.iter().map(|(id, t)| (id.clone(), t)).collect();
    let proposals = cfg.detection.proposals();
    let rule = cfg.inference.image_score;
    build_score_table(&refs, transforms, |img| {
        Ok(image_score_with(&net.detect(params, img, &proposals)?, rule))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub breast: RocCurve,
    pub subject: RocCurve,
}

pub fn evaluate_table(
    exams: &[PhantomExam],
    table: &ScoreTable,
    transforms: &[DihedralTransform],
    rule: VariantRule,
) -> Result<Evaluation> {
    let exams: Vec<_> = exams.iter().map(|e| e.exam.clone()).collect();
    let aggs = exams
        .iter()
        .map(|e| aggregate_subject(table, e, transforms, rule))
        .collect::<Result<Vec<_>>>()?;
    let (s, l) = breastwise_rows(&exams, &aggs)?;
    let breast = roc_curve(&s, &l)?;
    debug_assert_eq!(breast.auc, auc(&s, &l)?);
    let (s, l) = subjectwise_rows(&exams, &aggs)?;
    let subject = roc_curve(&s, &l)?;
    Ok(Evaluation { breast, subject })
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub train_seconds: f64,
    pub total_seconds: f64,
    pub epochs: Vec<EpochSummary>,
    /// Identity transform only.
    pub plain: Evaluation,
    /// All eight dihedral variants.
    pub augmented: Evaluation,
    pub table: ScoreTable,
    pub weights: Vec<u8>,
}

/// Generates both splits, trains, and scores the held-out split with and
/// without test-time augmentation. The identity scores are shared.
pub fn run_end_to_end(cfg: &ExperimentConfig, mut on_epoch: impl FnMut(&EpochSummary)) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let (train_seed, test_seed) = cfg.data.split_seeds();
    let train = generate_dataset(&cfg.data.phantom(cfg.data.train_exams), train_seed)?;
    let test = generate_dataset(&cfg.data.phantom(cfg.data.test_exams), test_seed)?;
    let data = training_images(cfg, &train)?;
    drop(train);
    let t = Instant::now();
    let mut epochs = Vec::new();
    let (net, params) = train_model(cfg, &data, |s| {
        on_epoch(s);
        epochs.push(*s);
    })?;
    let train_seconds = t.elapsed().as_secs_f64();
    drop(data);
    let images = normalized_images(cfg, &test)?;
    let all = inference_transforms(true);
    let table = score_images(cfg, &net, &params, &images, &all)?;
    let rule = cfg.inference.variant_rule;
    let plain = evaluate_table(&test, &table, &inference_transforms(false), rule)?;
    let augmented = evaluate_table(&test, &table, &all, rule)?;
    Ok(RunReport {
        train_seconds,
        total_seconds: start.elapsed().as_secs_f64(),
        epochs,
        plain,
        augmented,
        table,
        weights: encode_weights(&params),
    })
}
