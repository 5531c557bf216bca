//! ROC curves and rank-based AUC for breast-wise and subject-wise scoring.

use rand::Rng;

use crate::error::{Error, Result};
use crate::inference::{Exam, SubjectAggregate};
use crate::tensor::seeded_rng;

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("score {i} is not finite")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(format!(
            "AUC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

/// Indices sorted by ascending score, split into runs of equal scores.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Mann-Whitney U over `#pos * #neg`, ties counted one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    // Twice the positive rank sum, so that midranks stay integral.
    let mut rank2 = 0u128;
    let mut seen = 0u128;
    for g in tie_groups(scores) {
        let n = g.len() as u128;
        let mid2 = 2 * seen + n + 1;
        let p = g.iter().filter(|&&i| labels[i]).count() as u128;
        rank2 += p * mid2;
        seen += n;
    }
    let p = pos as u128;
    let u2 = rank2 - p * (p + 1);
    Ok(u2 as f64 / 2.0 / (pos as f64 * neg as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// `(false positive rate, true positive rate)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = vec![(0.0, 0.0)];
    let mut area = 0.0;
    for g in tie_groups(scores).into_iter().rev() {
        let p = g.iter().filter(|&&i| labels[i]).count();
        let (tp0, fp0) = (tp, fp);
        tp += p;
        fp += g.len() - p;
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(RocCurve {
        points,
        auc: area / (pos as f64 * neg as f64),
    })
}

impl RocCurve {
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }

    /// `fpr<TAB>tpr` rows followed by an `auc<TAB>value` summary line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("fpr\ttpr\n");
        for (f, t) in &self.points {
            out.push_str(&format!("{f}\t{t}\n"));
        }
        out.push_str(&format!("auc\t{}\n", self.auc));
        out
    }
}

/// Mean and standard deviation of the AUC over stratified bootstrap
/// resamples.
pub fn bootstrap_auc(scores: &[f64], labels: &[bool], resamples: usize, seed: u64) -> Result<(f64, f64)> {
    check_inputs(scores, labels)?;
    if resamples < 2 {
        return Err(Error::invalid("bootstrap needs at least two resamples"));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let mut rng = seeded_rng(&[seed]);
    let mut vals = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut s = Vec::with_capacity(labels.len());
        let mut l = Vec::with_capacity(labels.len());
        for (set, label) in [(&pos, true), (&neg, false)] {
            for _ in 0..set.len() {
                s.push(scores[set[rng.gen_range(0..set.len())]]);
                l.push(label);
            }
        }
        vals.push(auc(&s, &l)?);
    }
    let m = vals.iter().sum::<f64>() / resamples as f64;
    let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (resamples - 1) as f64;
    Ok((m, v.sqrt()))
}

fn check_pairs(exams: &[Exam], aggregates: &[SubjectAggregate]) -> Result<()> {
    if exams.len() != aggregates.len() {
        return Err(Error::invalid(format!(
            "{} exams but {} aggregates",
            exams.len(),
            aggregates.len()
        )));
    }
    for (e, a) in exams.iter().zip(aggregates) {
        if !e.labels.keys().eq(a.per_laterality.keys()) {
            return Err(Error::invalid(format!(
                "exam {}: labelled lateralities do not match the aggregated ones",
                e.subject_id
            )));
        }
    }
    Ok(())
}

/// One row per breast: its aggregated score and whether it is malignant.
pub fn breastwise_rows(exams: &[Exam], aggregates: &[SubjectAggregate]) -> Result<(Vec<f64>, Vec<bool>)> {
    check_pairs(exams, aggregates)?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (e, a) in exams.iter().zip(aggregates) {
        for (lat, &label) in &e.labels {
            scores.push(a.per_laterality[lat]);
            labels.push(label);
        }
    }
    Ok((scores, labels))
}

/// One row per subject: positive when either breast is malignant.
pub fn subjectwise_rows(exams: &[Exam], aggregates: &[SubjectAggregate]) -> Result<(Vec<f64>, Vec<bool>)> {
    check_pairs(exams, aggregates)?;
    Ok(exams
        .iter()
        .zip(aggregates)
        .map(|(e, a)| (a.subject, e.labels.values().any(|&l| l)))
        .unzip())
}
