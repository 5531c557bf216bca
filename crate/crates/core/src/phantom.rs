//! Synthetic screening exams: textured breast phantoms with masses and
//! calcification clusters, recorded by simulated devices with distinct
//! intensity responses.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::{BBox, FindingClass};
use crate::error::{Error, Result};
use crate::inference::{Exam, ImageId, Laterality, View};
use crate::tensor::{seeded_rng, Tensor};

/// Largest raw detector value (12-bit).
pub const RAW_MAX: u32 = 4095;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionKind {
    Mass,
    Calcification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub side: usize,
    pub exams: usize,
    /// Probability that a breast carries a malignant lesion.
    pub prevalence: f64,
    /// Probability that a non-malignant breast carries a benign mass.
    pub benign_rate: f64,
    /// Malignant lesion kinds to draw from, uniformly.
    pub lesion_kinds: Vec<LesionKind>,
    /// Gamma of each simulated device's intensity response.
    pub device_gammas: Vec<f64>,
    pub texture_seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            side: 256,
            exams: 200,
            prevalence: 0.3,
            benign_rate: 0.2,
            lesion_kinds: vec![LesionKind::Mass, LesionKind::Calcification],
            device_gammas: vec![1.0, 0.6],
            texture_seed: 7,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self, stride: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prevalence) || !(0.0..=1.0).contains(&self.benign_rate) {
            return Err(Error::Config(format!(
                "prevalence and benign_rate must lie in [0, 1], got {} and {}",
                self.prevalence, self.benign_rate
            )));
        }
        if self.side < 64 || stride == 0 || !self.side.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "image side {} must be >= 64 and a multiple of the backbone stride {stride}",
                self.side
            )));
        }
        if self.lesion_kinds.is_empty() || self.device_gammas.is_empty() {
            return Err(Error::Config("lesion_kinds and device_gammas must be non-empty".into()));
        }
        if self.device_gammas.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::Config("device gammas must be positive".into()));
        }
        Ok(())
    }

    pub fn lut(&self, device: usize) -> Result<DeviceLut> {
        let g = *self
            .device_gammas
            .get(device)
            .ok_or_else(|| Error::invalid(format!("unknown device {device}")))?;
        Ok(DeviceLut::gamma(device, g))
    }
}

/// Monotone map from raw intensities `0..=domain_max` to `[0, 1]`, given by
/// equally spaced nodes and linear interpolation between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceLut {
    pub device: usize,
    pub domain_max: f64,
    pub table: Vec<f64>,
}

impl DeviceLut {
    pub fn new(device: usize, domain_max: f64, table: Vec<f64>) -> Result<Self> {
        if table.len() < 2 || !(domain_max > 0.0 && domain_max.is_finite()) {
            return Err(Error::invalid("a LUT needs >= 2 nodes and a positive domain"));
        }
        if table.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("LUT values must lie in [0, 1]"));
        }
        if let Some(i) = table.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::invalid(format!("LUT decreases between nodes {i} and {}", i + 1)));
        }
        Ok(DeviceLut {
            device,
            domain_max,
            table,
        })
    }

    pub fn identity() -> Self {
        DeviceLut {
            device: 0,
            domain_max: 1.0,
            table: vec![0.0, 1.0],
        }
    }

    /// Inverts a device that records tissue value `t` as `RAW_MAX * t^gamma`.
    pub fn gamma(device: usize, gamma: f64) -> Self {
        let n = RAW_MAX as usize;
        DeviceLut {
            device,
            domain_max: RAW_MAX as f64,
            table: (0..=n).map(|r| (r as f64 / n as f64).powf(1.0 / gamma)).collect(),
        }
    }

    pub fn map(&self, raw: f64) -> Result<f64> {
        if !(0.0..=self.domain_max).contains(&raw) {
            return Err(Error::invalid(format!(
                "raw value {raw} outside LUT domain [0, {}]",
                self.domain_max
            )));
        }
        let pos = raw / self.domain_max * (self.table.len() - 1) as f64;
        let i = (pos.floor() as usize).min(self.table.len() - 2);
        let f = pos - i as f64;
        Ok(self.table[i] + f * (self.table[i + 1] - self.table[i]))
    }
}

pub fn normalize_intensity(raw: &Tensor, lut: &DeviceLut) -> Result<Tensor> {
    let data = raw.data().iter().map(|&v| lut.map(v)).collect::<Result<Vec<_>>>()?;
    Tensor::new(raw.shape().to_vec(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomImage {
    pub id: ImageId,
    /// `[1, side, side]` raw detector values.
    pub raw: Tensor,
    pub findings: Vec<(BBox, FindingClass)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomExam {
    pub exam: Exam,
    pub device: usize,
    pub images: Vec<PhantomImage>,
}

pub fn generate_dataset(spec: &PhantomSpec, seed: u64) -> Result<Vec<PhantomExam>> {
    spec.validate(1)?;
    (0..spec.exams)
        .into_par_iter()
        .map(|i| generate_exam(spec, seed, i))
        .collect()
}

fn exam_rng(seed: u64, index: usize, stream: u64) -> ChaCha8Rng {
    seeded_rng(&[seed, index as u64, stream])
}

#[derive(Debug, Clone, Copy)]
enum Lesion {
    Malignant(LesionKind),
    Benign,
}

fn generate_exam(spec: &PhantomSpec, seed: u64, index: usize) -> Result<PhantomExam> {
    let mut rng = exam_rng(seed, index, 0);
    let subject = format!("S{index:05}");
    let device = rng.gen_range(0..spec.device_gammas.len());
    let mut labels = [false; 2];
    let mut lesions = [None; 2];
    for (li, lesion) in lesions.iter_mut().enumerate() {
        if rng.gen_bool(spec.prevalence) {
            labels[li] = true;
            let kind = spec.lesion_kinds[rng.gen_range(0..spec.lesion_kinds.len())];
            *lesion = Some((Lesion::Malignant(kind), rng.gen_range(0.0..1.0)));
        } else if rng.gen_bool(spec.benign_rate) {
            *lesion = Some((Lesion::Benign, rng.gen_range(0.0..1.0)));
        }
    }
    let gamma = spec.device_gammas[device];
    let mut images = Vec::with_capacity(4);
    for (li, lat) in Laterality::BOTH.into_iter().enumerate() {
        for (vi, view) in View::BOTH.into_iter().enumerate() {
            let mut irng = exam_rng(seed ^ spec.texture_seed.rotate_left(32), index, 1 + (li * 2 + vi) as u64);
            let (tissue, findings) = render_view(spec.side, lat, view, lesions[li], &mut irng);
            let raw = tissue.map(|t| (RAW_MAX as f64 * t.clamp(0.0, 1.0).powf(gamma)).round());
            images.push(PhantomImage {
                id: ImageId::new(subject.clone(), lat, view),
                raw,
                findings,
            });
        }
    }
    Ok(PhantomExam {
        exam: Exam::full(subject, labels),
        device,
        images,
    })
}

struct Breast {
    lat: Laterality,
    center_row: f64,
    semi_rows: f64,
    semi_cols: f64,
    pectoral: Option<(f64, f64)>,
}

impl Breast {
    /// Distance from the chest wall.
    fn depth(&self, col: f64, side: f64) -> f64 {
        match self.lat {
            Laterality::Left => col,
            Laterality::Right => side - col,
        }
    }

    fn radius(&self, row: f64, col: f64, side: f64) -> f64 {
        let dr = (row - self.center_row) / self.semi_rows;
        let dc = self.depth(col, side) / self.semi_cols;
        (dr * dr + dc * dc).sqrt()
    }

    fn pectoral_level(&self, row: f64, col: f64, side: f64) -> f64 {
        match self.pectoral {
            Some((ph, pw)) => row / ph + self.depth(col, side) / pw,
            None => f64::INFINITY,
        }
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Smooth random field in about `[-1, 1]`: a coarse grid of uniform values,
/// bilinearly upsampled.
fn value_noise(side: usize, cells: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let g: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let scale = cells as f64 / side as f64;
    let mut out = vec![0.0; side * side];
    for r in 0..side {
        let y = r as f64 * scale;
        let (y0, fy) = ((y.floor() as usize).min(cells - 1), y - y.floor().min((cells - 1) as f64));
        for c in 0..side {
            let x = c as f64 * scale;
            let (x0, fx) = ((x.floor() as usize).min(cells - 1), x - x.floor().min((cells - 1) as f64));
            let at = |i: usize, j: usize| g[i * (cells + 1) + j];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            out[r * side + c] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

fn render_view(
    side: usize,
    lat: Laterality,
    view: View,
    lesion: Option<(Lesion, f64)>,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Vec<(BBox, FindingClass)>) {
    let s = side as f64;
    let breast = Breast {
        lat,
        center_row: s * rng.gen_range(0.45..0.55),
        semi_rows: s * rng.gen_range(0.40..0.47),
        semi_cols: s * rng.gen_range(0.70..0.85),
        pectoral: match view {
            View::Cc => None,
            View::Mlo => Some((s * rng.gen_range(0.45..0.6), s * rng.gen_range(0.22..0.32))),
        },
    };
    let coarse = value_noise(side, 6, rng);
    let fine = value_noise(side, 24, rng);
    let base = rng.gen_range(0.28..0.34);
    let grain = Normal::new(0.0, 0.012).expect("valid sigma");
    let mut img = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let k = r * side + c;
            let rad = breast.radius(y, x, s);
            let inside = 1.0 - smoothstep(0.93, 1.0, rad);
            let mut t = 0.03;
            if inside > 0.0 {
                let density = base + 0.07 * coarse[k] + 0.035 * fine[k];
                let fat = 0.12 * smoothstep(0.6, 1.0, rad);
                t += inside * (density - fat - 0.03);
                if breast.pectoral_level(y, x, s) < 1.0 {
                    t += 0.18;
                }
            }
            img[k] = t + grain.sample(rng);
        }
    }
    let mut findings = Vec::new();
    if let Some((kind, size)) = lesion {
        let (bbox, class) = match kind {
            Lesion::Malignant(LesionKind::Mass) => {
                let r = 9.0 + 6.0 * size + rng.gen_range(-0.8..0.8);
                let (cy, cx) = place(&breast, s, r * 1.6, rng);
                draw_spiculated(&mut img, side, cy, cx, r, rng);
                (BBox::from_center(cy, cx, 2.4 * r, 2.4 * r), FindingClass::Malignant)
            }
            Lesion::Malignant(LesionKind::Calcification) => {
                let spread = 6.0 + 4.0 * size;
                let (cy, cx) = place(&breast, s, spread + 6.0, rng);
                let b = draw_calcifications(&mut img, side, cy, cx, spread, rng);
                (b, FindingClass::Malignant)
            }
            Lesion::Benign => {
                let r = 8.0 + 6.0 * size + rng.gen_range(-0.8..0.8);
                let (cy, cx) = place(&breast, s, r * 1.3, rng);
                draw_round(&mut img, side, cy, cx, r, rng);
                (BBox::from_center(cy, cx, 2.0 * r, 2.0 * r), FindingClass::Benign)
            }
        };
        findings.push((bbox.clip(s, s), class));
    }
    let img = img.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    (Tensor::new(vec![1, side, side], img).expect("square image"), findings)
}

/// Lesion centre well inside the breast and outside the pectoral muscle.
fn place(breast: &Breast, s: f64, margin: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
    for _ in 0..1000 {
        let y = rng.gen_range(margin..s - margin);
        let x = rng.gen_range(margin..s - margin);
        if breast.radius(y, x, s) < 0.72 && breast.pectoral_level(y, x, s) > 1.3 && breast.depth(x, s) > margin {
            return (y, x);
        }
    }
    (breast.center_row, match breast.lat {
        Laterality::Left => breast.semi_cols * 0.4,
        Laterality::Right => s - breast.semi_cols * 0.4,
    })
}

fn splat(img: &mut [f64], side: usize, cy: f64, cx: f64, reach: f64, mut f: impl FnMut(f64, f64) -> f64) {
    let r0 = (cy - reach).floor().max(0.0) as usize;
    let r1 = ((cy + reach).ceil() as usize).min(side);
    let c0 = (cx - reach).floor().max(0.0) as usize;
    let c1 = ((cx + reach).ceil() as usize).min(side);
    for r in r0..r1 {
        for c in c0..c1 {
            img[r * side + c] += f(r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
        }
    }
}

fn draw_spiculated(img: &mut [f64], side: usize, cy: f64, cx: f64, r: f64, rng: &mut ChaCha8Rng) {
    let amp = rng.gen_range(0.30..0.40);
    splat(img, side, cy, cx, 1.3 * r, |dy, dx| {
        let d = (dy * dy + dx * dx).sqrt() / r;
        amp * (-(d.powi(4))).exp()
    });
    let spikes = rng.gen_range(7..12);
    for _ in 0..spikes {
        let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let len = r * rng.gen_range(1.3..1.9);
        let (sy, sx) = (phi.sin(), phi.cos());
        splat(img, side, cy, cx, len + 2.0, |dy, dx| {
            let along = dy * sy + dx * sx;
            let across = dy * sx - dx * sy;
            if along < 0.5 * r || along > len {
                return 0.0;
            }
            let taper = 1.0 - (along - 0.5 * r) / (len - 0.5 * r);
            0.5 * amp * taper * (-(across * across) / 1.2).exp()
        });
    }
}

fn draw_calcifications(img: &mut [f64], side: usize, cy: f64, cx: f64, spread: f64, rng: &mut ChaCha8Rng) -> BBox {
    let n = rng.gen_range(6..13);
    let (mut rmin, mut cmin, mut rmax, mut cmax) = (cy, cx, cy, cx);
    for _ in 0..n {
        let (ry, rx) = loop {
            let (a, b) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if a * a + b * b <= 1.0 {
                break (cy + a * spread, cx + b * spread);
            }
        };
        let amp = rng.gen_range(0.45..0.65);
        let sigma = rng.gen_range(0.8..1.3);
        splat(img, side, ry, rx, 4.0 * sigma, |dy, dx| amp * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp());
        rmin = rmin.min(ry);
        cmin = cmin.min(rx);
        rmax = rmax.max(ry);
        cmax = cmax.max(rx);
    }
    let (pad, min_side) = (4.0, 16.0);
    let h = (rmax - rmin + 2.0 * pad).max(min_side);
    let w = (cmax - cmin + 2.0 * pad).max(min_side);
    BBox::from_center((rmin + rmax) / 2.0, (cmin + cmax) / 2.0, h, w)
}

fn draw_round(img: &mut [f64], side: usize, cy: f64, cx: f64, r: f64, rng: &mut ChaCha8Rng) {
    let amp = rng.gen_range(0.10..0.16);
    splat(img, side, cy, cx, 1.4 * r, |dy, dx| {
        let d = (dy * dy + dx * dx).sqrt() / r;
        amp * (1.0 - smoothstep(0.7, 1.15, d))
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(exams: usize, prevalence: f64) -> PhantomSpec {
        PhantomSpec {
            side: 64,
            exams,
            prevalence,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn zero_prevalence_has_no_malignancy() {
        let spec = PhantomSpec {
            benign_rate: 0.0,
            ..small(10, 0.0)
        };
        for e in generate_dataset(&spec, 3).unwrap() {
            assert!(e.exam.labels.values().all(|&l| !l));
            assert!(e.images.iter().all(|i| i.findings.is_empty()));
        }
    }

    #[test]
    fn same_seed_same_data() {
        let spec = small(4, 0.5);
        assert_eq!(generate_dataset(&spec, 9).unwrap(), generate_dataset(&spec, 9).unwrap());
        assert_ne!(generate_dataset(&spec, 9).unwrap(), generate_dataset(&spec, 10).unwrap());
    }

    #[test]
    fn views_share_lesions() {
        for e in generate_dataset(&small(30, 0.5), 1).unwrap() {
            for lat in Laterality::BOTH {
                let classes: Vec<Vec<FindingClass>> = e
                    .images
                    .iter()
                    .filter(|i| i.id.laterality == lat)
                    .map(|i| i.findings.iter().map(|f| f.1).collect())
                    .collect();
                assert_eq!(classes[0], classes[1]);
                assert_eq!(e.exam.labels[&lat], classes[0].contains(&FindingClass::Malignant));
            }
            for im in &e.images {
                assert!(im.raw.data().iter().all(|&v| (0.0..=RAW_MAX as f64).contains(&v) && v.fract() == 0.0));
                for (b, _) in &im.findings {
                    assert!(b.is_valid() && b.height() >= 8.0);
                }
            }
        }
    }

    #[test]
    fn identity_lut_and_constant_image() {
        let x = Tensor::from_fn(&[1, 3, 3], |i| i as f64 / 8.0);
        assert_eq!(normalize_intensity(&x, &DeviceLut::identity()).unwrap(), x);
        let lut = DeviceLut::gamma(1, 0.6);
        let c = normalize_intensity(&Tensor::filled(&[1, 4, 4], 1234.0), &lut).unwrap();
        assert!(c.data().iter().all(|&v| v == c.data()[0]));
        assert!(lut.map(-1.0).is_err());
        assert!(lut.map(4096.0).is_err());
        assert!(DeviceLut::new(0, 1.0, vec![0.5, 0.2]).is_err());
    }

    #[test]
    fn rejects_bad_spec() {
        assert!(small(1, 1.5).validate(16).is_err());
        assert!(PhantomSpec { side: 100, ..small(1, 0.1) }.validate(16).is_err());
    }
}
