//! Dihedral test-time augmentation, per-image scoring and the
//! laterality/subject aggregation rule.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::{BBox, Detection};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Element of the dihedral group of the square: `x -> R^rot_quarter F^hflip x`
/// where `F` mirrors columns and `R` rotates a quarter turn counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct DihedralTransform {
    rot_quarter: u8,
    hflip: bool,
}

impl DihedralTransform {
    pub const IDENTITY: DihedralTransform = DihedralTransform {
        rot_quarter: 0,
        hflip: false,
    };

    pub fn new(rot_quarter: u8, hflip: bool) -> Result<Self> {
        if rot_quarter > 3 {
            return Err(Error::invalid(format!("rot_quarter must be 0..=3, got {rot_quarter}")));
        }
        Ok(DihedralTransform { rot_quarter, hflip })
    }

    pub fn rot_quarter(self) -> u8 {
        self.rot_quarter
    }

    pub fn hflip(self) -> bool {
        self.hflip
    }

    pub fn all() -> [DihedralTransform; 8] {
        std::array::from_fn(|i| DihedralTransform {
            rot_quarter: (i % 4) as u8,
            hflip: i >= 4,
        })
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(self, other: DihedralTransform) -> DihedralTransform {
        let qb = if self.hflip {
            (4 - other.rot_quarter) % 4
        } else {
            other.rot_quarter
        };
        DihedralTransform {
            rot_quarter: (self.rot_quarter + qb) % 4,
            hflip: self.hflip ^ other.hflip,
        }
    }

    pub fn inverse(self) -> DihedralTransform {
        if self.hflip {
            self
        } else {
            DihedralTransform {
                rot_quarter: (4 - self.rot_quarter) % 4,
                hflip: false,
            }
        }
    }

    /// Extents after the transform.
    pub fn output_hw(self, h: usize, w: usize) -> (usize, usize) {
        if self.rot_quarter % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Maps a continuous point of an `h x w` image.
    pub fn transform_point(self, row: f64, col: f64, h: f64, w: f64) -> (f64, f64) {
        let (mut r, mut c, mut hh, mut ww) = (row, col, h, w);
        if self.hflip {
            c = ww - c;
        }
        for _ in 0..self.rot_quarter {
            (r, c) = (ww - c, r);
            (hh, ww) = (ww, hh);
        }
        let _ = hh;
        (r, c)
    }

    fn pixel_source(self, i: usize, j: usize, h: usize, w: usize) -> (usize, usize) {
        // Inverse map of output pixel (i, j) back to the input grid.
        let inv = self.inverse();
        let (oh, ow) = self.output_hw(h, w);
        let (r, c) = inv.transform_point(i as f64 + 0.5, j as f64 + 0.5, oh as f64, ow as f64);
        ((r - 0.5).round() as usize, (c - 0.5).round() as usize)
    }

    /// Exact pixel permutation of every channel of a `[C, H, W]` (or `[H, W]`)
    /// tensor; odd quarter turns swap the extents.
    pub fn apply(self, image: &Tensor) -> Tensor {
        let (ch, h, w) = image.dims3().expect("apply needs a 2-D or 3-D map");
        let (oh, ow) = self.output_hw(h, w);
        let src: Vec<usize> = (0..oh * ow)
            .map(|k| {
                let (r, c) = self.pixel_source(k / ow, k % ow, h, w);
                r * w + c
            })
            .collect();
        let mut data = Vec::with_capacity(image.len());
        for c in 0..ch {
            let plane = image.plane(c);
            data.extend(src.iter().map(|&s| plane[s]));
        }
        let shape = match image.rank() {
            2 => vec![oh, ow],
            3 => vec![ch, oh, ow],
            _ => vec![1, ch, oh, ow],
        };
        Tensor::new(shape, data).expect("permutation preserves size")
    }

    /// Maps a box of an `h x w` image; corners are re-sorted to min/max form.
    pub fn transform_box(self, b: &BBox, h: usize, w: usize) -> BBox {
        let (hf, wf) = (h as f64, w as f64);
        let (r0, c0) = self.transform_point(b.row_min, b.col_min, hf, wf);
        let (r1, c1) = self.transform_point(b.row_max, b.col_max, hf, wf);
        BBox::new(r0.min(r1), c0.min(c1), r0.max(r1), c0.max(c1))
    }
}

pub fn apply_transform(image: &Tensor, t: DihedralTransform) -> Tensor {
    t.apply(image)
}

pub fn transform_box(b: &BBox, t: DihedralTransform, h: usize, w: usize) -> BBox {
    t.transform_box(b, h, w)
}

impl fmt::Display for DihedralTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}{}", self.rot_quarter, if self.hflip { "f" } else { "" })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Laterality {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    Cc,
    Mlo,
}

impl Laterality {
    pub const BOTH: [Laterality; 2] = [Laterality::Left, Laterality::Right];

    pub fn code(self) -> &'static str {
        match self {
            Laterality::Left => "L",
            Laterality::Right => "R",
        }
    }
}

impl View {
    pub const BOTH: [View; 2] = [View::Cc, View::Mlo];

    pub fn code(self) -> &'static str {
        match self {
            View::Cc => "CC",
            View::Mlo => "MLO",
        }
    }
}

impl FromStr for Laterality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L" => Ok(Laterality::Left),
            "R" => Ok(Laterality::Right),
            _ => Err(Error::invalid(format!("unknown laterality {s:?}"))),
        }
    }
}

impl FromStr for View {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "CC" => Ok(View::Cc),
            "MLO" => Ok(View::Mlo),
            _ => Err(Error::invalid(format!("unknown view {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ImageId {
    pub subject: String,
    pub laterality: Laterality,
    pub view: View,
}

impl ImageId {
    pub fn new(subject: impl Into<String>, laterality: Laterality, view: View) -> Self {
        ImageId {
            subject: subject.into(),
            laterality,
            view,
        }
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}_{}", self.subject, self.laterality.code(), self.view.code())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exam {
    pub subject_id: String,
    pub images: BTreeMap<(Laterality, View), ImageId>,
    /// Malignancy ground truth per present laterality.
    pub labels: BTreeMap<Laterality, bool>,
}

impl Exam {
    /// Exam with both views of both breasts.
    pub fn full(subject_id: impl Into<String>, labels: [bool; 2]) -> Self {
        let subject_id = subject_id.into();
        let mut images = BTreeMap::new();
        for lat in Laterality::BOTH {
            for view in View::BOTH {
                images.insert((lat, view), ImageId::new(subject_id.clone(), lat, view));
            }
        }
        Exam {
            subject_id,
            images,
            labels: Laterality::BOTH.into_iter().zip(labels).collect(),
        }
    }

    pub fn lateralities(&self) -> Vec<Laterality> {
        let mut v: Vec<Laterality> = self.images.keys().map(|k| k.0).collect();
        v.dedup();
        v
    }

    pub fn validate(&self) -> Result<()> {
        for lat in self.labels.keys() {
            if !self.images.keys().any(|k| k.0 == *lat) {
                return Err(Error::invalid(format!(
                    "exam {} labels laterality {} without images",
                    self.subject_id,
                    lat.code()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTable {
    entries: BTreeMap<(ImageId, DihedralTransform), f64>,
}

pub const SCORE_TABLE_HEADER: &str = "subject_id\tlaterality\tview\trot\tflip\tscore";

impl ScoreTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image: ImageId, t: DihedralTransform, score: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid(format!("score {score} for {image} {t} outside [0, 1]")));
        }
        self.entries.insert((image, t), score);
        Ok(())
    }

    pub fn get(&self, image: &ImageId, t: DihedralTransform) -> Option<f64> {
        self.entries.get(&(image.clone(), t)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ImageId, DihedralTransform, f64)> {
        self.entries.iter().map(|((id, t), &s)| (id, *t, s))
    }

    /// Tab-separated export, rows in a fixed order. Scores use the shortest
    /// representation that parses back to the same value.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(SCORE_TABLE_HEADER);
        out.push('\n');
        for (id, t, s) in self.iter() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                id.subject,
                id.laterality.code(),
                id.view.code(),
                t.rot_quarter,
                u8::from(t.hflip),
                s
            ));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == SCORE_TABLE_HEADER => {}
            _ => return Err(Error::invalid("score table: missing header")),
        }
        let mut table = ScoreTable::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::invalid(format!("score table line {}: malformed row {line:?}", n + 2));
            if f.len() != 6 {
                return Err(bad());
            }
            let rot: u8 = f[3].parse().map_err(|_| bad())?;
            let flip = match f[4] {
                "0" => false,
                "1" => true,
                _ => return Err(bad()),
            };
            let score: f64 = f[5].parse().map_err(|_| bad())?;
            let id = ImageId::new(f[0], f[1].parse()?, f[2].parse()?);
            table.insert(id, DihedralTransform::new(rot, flip)?, score)?;
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum ImageScoreRule {
    #[default]
    Max,
    TopKMean {
        k: usize,
    },
}

/// Malignant-class score of an image from its detections; 0 when empty.
pub fn image_score(detections: &[Detection]) -> f64 {
    image_score_with(detections, ImageScoreRule::Max)
}

pub fn image_score_with(detections: &[Detection], rule: ImageScoreRule) -> f64 {
    let mut s: Vec<f64> = detections.iter().map(|d| d.malignant()).collect();
    if s.is_empty() {
        return 0.0;
    }
    s.sort_by(|a, b| b.total_cmp(a));
    match rule {
        ImageScoreRule::Max => s[0],
        ImageScoreRule::TopKMean { k } => {
            let k = k.clamp(1, s.len());
            s[..k].iter().sum::<f64>() / k as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantRule {
    /// Mean over views and transforms.
    #[default]
    Mean,
    /// Max over views and transforms.
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectAggregate {
    pub per_laterality: BTreeMap<Laterality, f64>,
    pub subject: f64,
}

/// Per-laterality mean (or max) over all `(view, transform)` entries, then
/// the max over lateralities. Values are summed in sorted order so the result
/// does not depend on the order in which entries were produced.
pub fn aggregate_subject(
    table: &ScoreTable,
    exam: &Exam,
    transforms: &[DihedralTransform],
    rule: VariantRule,
) -> Result<SubjectAggregate> {
    if transforms.is_empty() {
        return Err(Error::invalid("aggregate_subject needs at least one transform"));
    }
    let mut per_laterality = BTreeMap::new();
    for lat in exam.lateralities() {
        let mut vals = Vec::new();
        for ((l, _), id) in exam.images.iter().filter(|(k, _)| k.0 == lat) {
            debug_assert_eq!(*l, lat);
            for &t in transforms {
                let s = table
                    .get(id, t)
                    .ok_or_else(|| Error::invalid(format!("score table has no entry for {id} under {t}")))?;
                vals.push(s);
            }
        }
        vals.sort_by(f64::total_cmp);
        let v = match rule {
            VariantRule::Mean => vals.iter().sum::<f64>() / vals.len() as f64,
            VariantRule::Max => *vals.last().expect("non-empty"),
        };
        per_laterality.insert(lat, v);
    }
    if per_laterality.is_empty() {
        return Err(Error::invalid(format!("exam {} has no images", exam.subject_id)));
    }
    let subject = per_laterality.values().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(SubjectAggregate { per_laterality, subject })
}

/// Scores every `(image, transform)` pair with `score`, in parallel.
pub fn build_score_table<F>(
    images: &[(ImageId, &Tensor)],
    transforms: &[DihedralTransform],
    score: F,
) -> Result<ScoreTable>
where
    F: Fn(&Tensor) -> Result<f64> + Sync,
{
    let jobs: Vec<(usize, DihedralTransform)> = (0..images.len())
        .flat_map(|i| transforms.iter().map(move |&t| (i, t)))
        .collect();
    let scores: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(i, t)| score(&t.apply(images[i].1)))
        .collect();
    let mut table = ScoreTable::new();
    for ((i, t), s) in jobs.into_iter().zip(scores) {
        table.insert(images[i].0.clone(), t, s?)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[1, h, w], |i| i as f64)
    }

    #[test]
    fn identity_and_half_turn() {
        let x = ramp(3, 4);
        assert_eq!(DihedralTransform::IDENTITY.apply(&x), x);
        let r2 = DihedralTransform::new(2, false).unwrap();
        assert_eq!(r2.apply(&r2.apply(&x)), x);
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        // [[0 1] [2 3]] rotated CCW is [[1 3] [0 2]].
        let x = ramp(2, 2);
        let r = DihedralTransform::new(1, false).unwrap().apply(&x);
        assert_eq!(r.data(), &[1.0, 3.0, 0.0, 2.0]);
        let f = DihedralTransform::new(0, true).unwrap().apply(&x);
        assert_eq!(f.data(), &[1.0, 0.0, 3.0, 2.0]);
        let r = DihedralTransform::new(1, false).unwrap().apply(&ramp(2, 3));
        assert_eq!(r.shape(), &[1, 3, 2]);
    }

    #[test]
    fn group_laws() {
        let x = Tensor::from_fn(&[1, 5, 5], |i| ((i * 37) % 11) as f64);
        for a in DihedralTransform::all() {
            assert_eq!(a.compose(a.inverse()), DihedralTransform::IDENTITY);
            for b in DihedralTransform::all() {
                assert_eq!(a.compose(b).apply(&x), a.apply(&b.apply(&x)));
            }
        }
        let orbit: std::collections::HashSet<Vec<u64>> = DihedralTransform::all()
            .iter()
            .map(|t| t.apply(&x).data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(orbit.len(), 8);
    }

    #[test]
    fn box_follows_pixels() {
        let (h, w) = (6, 9);
        let b = BBox::new(1.0, 2.0, 3.0, 7.0);
        let mut img = Tensor::zeros(&[1, h, w]);
        for r in 1..3 {
            for c in 2..7 {
                img.set(&[0, r, c], 1.0);
            }
        }
        for t in DihedralTransform::all() {
            let tb = t.transform_box(&b, h, w);
            let out = t.apply(&img);
            let (_, oh, ow) = out.dims3().unwrap();
            for r in 0..oh {
                for c in 0..ow {
                    let inside = (r as f64) >= tb.row_min
                        && (r as f64) < tb.row_max
                        && (c as f64) >= tb.col_min
                        && (c as f64) < tb.col_max;
                    assert_eq!(out.get(&[0, r, c]) == 1.0, inside, "{t} at ({r},{c})");
                }
            }
            let (oh, ow) = t.output_hw(h, w);
            assert_eq!(t.inverse().transform_box(&tb, oh, ow), b);
        }
    }

    fn det(p: f64) -> Detection {
        Detection {
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
            class_scores: [1.0 - p, 0.0, p],
            objectness: 1.0,
        }
    }

    #[test]
    fn image_score_examples() {
        assert_eq!(image_score(&[]), 0.0);
        let d = [det(0.2), det(0.9), det(0.4)];
        assert_eq!(image_score(&d), 0.9);
        assert_eq!(image_score_with(&d, ImageScoreRule::TopKMean { k: 2 }), (0.9 + 0.4) / 2.0);
    }

    #[test]
    fn aggregate_examples() {
        let mut exam = Exam::full("s1", [true, false]);
        exam.images.remove(&(Laterality::Right, View::Mlo));
        let mut t = ScoreTable::new();
        let id = |l, v| ImageId::new("s1", l, v);
        t.insert(id(Laterality::Left, View::Cc), DihedralTransform::IDENTITY, 0.2).unwrap();
        t.insert(id(Laterality::Left, View::Mlo), DihedralTransform::IDENTITY, 0.4).unwrap();
        t.insert(id(Laterality::Right, View::Cc), DihedralTransform::IDENTITY, 0.1).unwrap();
        let ts = [DihedralTransform::IDENTITY];
        let a = aggregate_subject(&t, &exam, &ts, VariantRule::Mean).unwrap();
        assert_eq!(a.per_laterality[&Laterality::Left], (0.2 + 0.4) / 2.0);
        assert_eq!(a.per_laterality[&Laterality::Right], 0.1);
        assert_eq!(a.subject, a.per_laterality[&Laterality::Left]);
        let m = aggregate_subject(&t, &exam, &ts, VariantRule::Max).unwrap();
        assert_eq!((m.per_laterality[&Laterality::Left], m.subject), (0.4, 0.4));

        let err = aggregate_subject(&t, &exam, &DihedralTransform::all(), VariantRule::Mean).unwrap_err();
        assert!(err.to_string().contains("s1_L_CC"));
    }

    #[test]
    fn tsv_round_trip() {
        let mut t = ScoreTable::new();
        t.insert(ImageId::new("a", Laterality::Right, View::Mlo), DihedralTransform::new(3, true).unwrap(), 0.1 + 0.2)
            .unwrap();
        t.insert(ImageId::new("a", Laterality::Left, View::Cc), DihedralTransform::IDENTITY, 1.0).unwrap();
        let back = ScoreTable::from_tsv(&t.to_tsv()).unwrap();
        assert_eq!(back, t);
        assert!(ScoreTable::from_tsv("nope\n").is_err());
        assert!(t.clone().insert(ImageId::new("a", Laterality::Left, View::Cc), DihedralTransform::IDENTITY, 1.5).is_err());
    }
}
