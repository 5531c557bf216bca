//! Experiment configuration: a sectioned key-value (TOML) file with a
//! schema version, strict keys and command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_io::{read_text, write_text};
use crate::detection::{ProposalConfig, RpnThresholds};
use crate::error::{Error, Result};
use crate::inference::{ImageScoreRule, VariantRule};
use crate::model::ModelConfig;
use crate::phantom::{LesionKind, PhantomSpec};
use crate::trainer::{TargetConfig, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub side: usize,
    pub train_exams: usize,
    pub test_exams: usize,
    pub prevalence: f64,
    pub benign_rate: f64,
    pub lesion_kinds: Vec<LesionKind>,
    pub device_gammas: Vec<f64>,
    pub texture_seed: u64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let p = PhantomSpec::default();
        DataConfig {
            side: p.side,
            train_exams: 200,
            test_exams: 100,
            prevalence: p.prevalence,
            benign_rate: p.benign_rate,
            lesion_kinds: p.lesion_kinds,
            device_gammas: p.device_gammas,
            texture_seed: p.texture_seed,
            seed: 2024,
        }
    }
}

impl DataConfig {
    pub fn phantom(&self, exams: usize) -> PhantomSpec {
        PhantomSpec {
            side: self.side,
            exams,
            prevalence: self.prevalence,
            benign_rate: self.benign_rate,
            lesion_kinds: self.lesion_kinds.clone(),
            device_gammas: self.device_gammas.clone(),
            texture_seed: self.texture_seed,
        }
    }

    /// Dataset seeds of the training and the held-out split.
    pub fn split_seeds(&self) -> (u64, u64) {
        (self.seed, self.seed ^ 0x7E57)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionConfig {
    pub rpn_positive_iou: f64,
    pub rpn_negative_iou: f64,
    pub pre_nms_top_n: usize,
    pub post_nms_top_n: usize,
    pub proposal_nms_iou: f64,
    pub min_box_size: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        let (t, p) = (RpnThresholds::default(), ProposalConfig::default());
        DetectionConfig {
            rpn_positive_iou: t.positive,
            rpn_negative_iou: t.negative,
            pre_nms_top_n: p.pre_nms_top_n,
            post_nms_top_n: p.post_nms_top_n,
            proposal_nms_iou: p.nms_iou,
            min_box_size: p.min_size,
        }
    }
}

impl DetectionConfig {
    pub fn proposals(&self) -> ProposalConfig {
        ProposalConfig {
            pre_nms_top_n: self.pre_nms_top_n,
            post_nms_top_n: self.post_nms_top_n,
            nms_iou: self.proposal_nms_iou,
            min_size: self.min_box_size,
        }
    }

    pub fn thresholds(&self) -> RpnThresholds {
        RpnThresholds {
            positive: self.rpn_positive_iou,
            negative: self.rpn_negative_iou,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Score all eight dihedral variants of every image.
    pub augment: bool,
    pub image_score: ImageScoreRule,
    pub variant_rule: VariantRule,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            augment: true,
            image_score: ImageScoreRule::Max,
            variant_rule: VariantRule::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub detection: DetectionConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            detection: DetectionConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn targets(&self) -> TargetConfig {
        TargetConfig {
            rpn: self.detection.thresholds(),
            proposals: self.detection.proposals(),
            rpn_batch: self.train.rpn_batch,
            roi_fg_iou: self.train.roi_fg_iou,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.phantom(1).validate(self.model.stride())?;
        if self.data.train_exams == 0 || self.data.test_exams == 0 {
            return Err(Error::Config("train_exams and test_exams must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses `text`, applies `section.key=value` overrides, then checks the
    /// schema version and every key.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(one_line(&e)))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        match table.get("schema_version") {
            None => return Err(Error::Config("missing schema_version".into())),
            Some(toml::Value::Integer(v)) if *v == SCHEMA_VERSION as i64 => {}
            Some(v) => {
                return Err(Error::Config(format!(
                    "schema_version {v} is not supported (expected {SCHEMA_VERSION})"
                )))
            }
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(one_line(&e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        Self::parse(&read_text(path)?, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_toml()?)
    }
}

fn one_line(e: &toml::de::Error) -> String {
    e.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `section.key=value`, where the value is read as a TOML value and falls
/// back to a plain string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("non-empty");
    let mut cur = table;
    for k in parents {
        cur = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{spec}`: `{k}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert!(text.starts_with("schema_version = 1"));
        assert_eq!(ExperimentConfig::parse(&text, &[]).unwrap(), cfg);
    }

    #[test]
    fn overrides() {
        let cfg = ExperimentConfig::parse(
            "schema_version = 1\n[train]\nepochs = 7\n",
            &["train.learning_rate=0.5".into(), "inference.augment=false".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.learning_rate, 0.5);
        assert!(!cfg.inference.augment);
    }

    #[test]
    fn strict_keys_and_version() {
        let err = ExperimentConfig::parse("schema_version = 1\n[train]\nlerning_rate = 0.1\n", &[]).unwrap_err();
        assert!(err.to_string().contains("lerning_rate"), "{err}");
        let err = ExperimentConfig::parse("schema_version = 1\n", &["data.sied=3".into()]).unwrap_err();
        assert!(err.to_string().contains("sied"), "{err}");
        let err = ExperimentConfig::parse("schema_version = 2\n", &[]).unwrap_err();
        assert!(err.to_string().contains("schema_version 2"), "{err}");
        assert!(ExperimentConfig::parse("[train]\n", &[]).is_err());
        assert!(ExperimentConfig::parse("schema_version = 1\n", &["train".into()]).is_err());
        assert!(ExperimentConfig::parse("schema_version = 1\n[train]\nlearning_rate = -1.0\n", &[]).is_err());
    }
}
