//! On-disk formats: plain 16-bit graymaps, the dataset manifest and the
//! binary weight file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::detection::{BBox, FindingClass};
use crate::error::{Error, Result};
use crate::inference::{Exam, ImageId, Laterality, View};
use crate::params::{ModelParams, ParamKind};
use crate::phantom::{PhantomExam, PhantomImage};
use crate::tensor::Tensor;

pub const PGM_MAXVAL: u32 = 65535;

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Plain (`P2`) graymap with maxval 65535. The image must hold integers in
/// `0..=65535`.
pub fn encode_pgm(image: &Tensor) -> Result<String> {
    let (c, h, w) = image.dims3()?;
    if c != 1 {
        return Err(Error::invalid(format!("graymap needs one channel, got {c}")));
    }
    let mut out = format!("P2\n{w} {h}\n{PGM_MAXVAL}\n");
    for row in image.data().chunks(w) {
        let mut line = Vec::with_capacity(w);
        for &v in row {
            if !(0.0..=PGM_MAXVAL as f64).contains(&v) || v.fract() != 0.0 {
                return Err(Error::invalid(format!("graymap value {v} is not an integer in 0..={PGM_MAXVAL}")));
            }
            line.push((v as u32).to_string());
        }
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}

pub fn decode_pgm(text: &str) -> Result<Tensor> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if tokens.next() != Some("P2") {
        return Err(Error::invalid("graymap: expected P2 magic"));
    }
    let mut num = |what: &str| -> Result<u32> {
        tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::invalid(format!("graymap: bad or missing {what}")))
    };
    let (w, h, maxval) = (num("width")? as usize, num("height")? as usize, num("maxval")?);
    if w == 0 || h == 0 || maxval == 0 || maxval > PGM_MAXVAL {
        return Err(Error::invalid(format!("graymap: bad header {w}x{h} maxval {maxval}")));
    }
    let mut data = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let v = num(&format!("pixel {i}"))?;
        if v > maxval {
            return Err(Error::invalid(format!("graymap: pixel {i} = {v} exceeds maxval {maxval}")));
        }
        data.push(v as f64);
    }
    Tensor::new(vec![1, h, w], data)
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    write_text(path, &encode_pgm(image)?)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    decode_pgm(&read_text(path)?)
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const MANIFEST_HEADER: &str = "subject_id\tlaterality\tview\tdevice\tlabel\tfile\tfindings";

fn encode_findings(findings: &[(BBox, FindingClass)]) -> String {
    if findings.is_empty() {
        return "-".into();
    }
    findings
        .iter()
        .map(|(b, c)| format!("{}:{},{},{},{}", c.name(), b.row_min, b.col_min, b.row_max, b.col_max))
        .collect::<Vec<_>>()
        .join(";")
}

fn decode_findings(s: &str) -> Option<Vec<(BBox, FindingClass)>> {
    if s == "-" {
        return Some(Vec::new());
    }
    s.split(';')
        .map(|f| {
            let (name, coords) = f.split_once(':')?;
            let v: Vec<f64> = coords.split(',').map(|x| x.parse().ok()).collect::<Option<_>>()?;
            if v.len() != 4 {
                return None;
            }
            Some((BBox::new(v[0], v[1], v[2], v[3]), FindingClass::parse(name)?))
        })
        .collect()
}

/// Writes every image as a graymap under `dir/images/` plus a manifest.
pub fn save_dataset(dir: &Path, exams: &[PhantomExam]) -> Result<()> {
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for e in exams {
        for im in &e.images {
            let file = format!("images/{}.pgm", im.id);
            write_pgm(&dir.join(&file), &im.raw)?;
            let label = e.exam.labels.get(&im.id.laterality).copied().unwrap_or(false);
            manifest.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                im.id.subject,
                im.id.laterality.code(),
                im.id.view.code(),
                e.device,
                u8::from(label),
                file,
                encode_findings(&im.findings)
            ));
        }
    }
    write_text(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<PhantomExam>> {
    let path = dir.join(MANIFEST_FILE);
    let text = read_text(&path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim_end) != Some(MANIFEST_HEADER) {
        return Err(Error::invalid(format!("{}: missing manifest header", path.display())));
    }
    let mut exams: BTreeMap<String, PhantomExam> = BTreeMap::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::invalid(format!("{} line {}: {what}", path.display(), n + 2));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(bad("expected 7 columns"));
        }
        let lat: Laterality = f[1].parse()?;
        let view: View = f[2].parse()?;
        let device: usize = f[3].parse().map_err(|_| bad("bad device"))?;
        let label = match f[4] {
            "0" => false,
            "1" => true,
            _ => return Err(bad("label must be 0 or 1")),
        };
        let findings = decode_findings(f[6]).ok_or_else(|| bad("malformed findings"))?;
        let raw = read_pgm(&dir.join(f[5]))?;
        let id = ImageId::new(f[0], lat, view);
        let entry = exams.entry(f[0].to_string()).or_insert_with(|| PhantomExam {
            exam: Exam {
                subject_id: f[0].to_string(),
                images: BTreeMap::new(),
                labels: BTreeMap::new(),
            },
            device,
            images: Vec::new(),
        });
        if entry.device != device {
            return Err(bad("device differs within an exam"));
        }
        if let Some(prev) = entry.exam.labels.insert(lat, label) {
            if prev != label {
                return Err(bad("label differs between views of a breast"));
            }
        }
        if entry.exam.images.insert((lat, view), id.clone()).is_some() {
            return Err(bad("duplicate image"));
        }
        entry.images.push(PhantomImage { id, raw, findings });
    }
    if exams.is_empty() {
        return Err(Error::invalid(format!("{}: no images", path.display())));
    }
    Ok(exams.into_values().collect())
}

pub const WEIGHT_MAGIC: [u8; 8] = *b"RFCNWTS\0";
pub const WEIGHT_VERSION: u32 = 1;

/// Layout: magic, `u32` version, `u32` entry count, then per entry `u32`
/// name length, UTF-8 name, `u8` kind (0 trainable, 1 statistic), `u32`
/// rank, `u64` extents and the values as `f64`. All little-endian.
pub fn encode_weights(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for e in params.iter() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(match e.kind {
            ParamKind::Trainable => 0,
            ParamKind::Statistic => 1,
        });
        out.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_weights(buf: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != WEIGHT_MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic"));
    }
    let version = r.u32("version")?;
    if version != WEIGHT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: WEIGHT_VERSION,
        });
    }
    let count = r.u32("entry count")?;
    let mut params = ModelParams::new();
    for i in 0..count {
        let at = r.pos;
        let len = r.u32("name length")? as usize;
        if len == 0 || len > 4096 || len > buf.len() - r.pos {
            r.pos = at;
            return Err(r.err(format!("entry {i}: bad name length {len}")));
        }
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.err(format!("entry {i}: name is not UTF-8")))?
            .to_string();
        let kind = match r.take(1, "kind")?[0] {
            0 => ParamKind::Trainable,
            1 => ParamKind::Statistic,
            k => return Err(r.err(format!("entry `{name}`: unknown kind {k}"))),
        };
        let at = r.pos;
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > Tensor::MAX_RANK {
            r.pos = at;
            return Err(r.err(format!("entry `{name}`: bad rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut n: u64 = 1;
        for _ in 0..rank {
            let at = r.pos;
            let d = r.u64("extent")?;
            n = n.checked_mul(d).filter(|&n| d > 0 && n <= (buf.len() / 8) as u64).ok_or_else(|| {
                Error::Format {
                    offset: at as u64,
                    msg: format!("entry `{name}`: bad extent {d}"),
                }
            })?;
            shape.push(d as usize);
        }
        let raw = r.take(n as usize * 8, &format!("data of `{name}`"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let at = r.pos;
        params
            .insert(name, kind, Tensor::new(shape, data)?)
            .map_err(|e| Error::Format {
                offset: at as u64,
                msg: e.to_string(),
            })?;
    }
    if r.pos != buf.len() {
        return Err(r.err(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(params)
}

pub fn save_model(path: &Path, params: &ModelParams) -> Result<()> {
    write_bytes(path, &encode_weights(params))
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    decode_weights(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
