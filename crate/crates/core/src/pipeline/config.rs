//! Pipeline configuration file.
//!
//! ```json
//! {
//!   "frames": "frames.json",
//!   "classification_inputs": [
//!     {"view": {"kind": "identity"}, "file": "cls/identity.json"},
//!     {"view": {"kind": "hflip"}, "file": "cls/hflip.json"}
//!   ],
//!   "tta_aggregation": "mean",
//!   "gate_rule": {"rule": "threshold", "threshold": 0.5},
//!   "grounding_inputs": [
//!     {"source": "convnext", "views": [{"view": {"kind": "identity"}, "file": "det/convnext.json"}]},
//!     {"source": "internimage", "views": [{"view": {"kind": "identity"}, "file": "det/internimage.json"}]}
//!   ],
//!   "ensemble": {"strategy": "affirmative", "cluster_iou": 0.5, "merge": "nms", "nms_iou": 0.5},
//!   "evaluation": {"gt": "gt.json", "mask": true, "cls_labels": "labels.json", "max_dets": 100},
//!   "output_dir": "out"
//! }
//! ```
//!
//! `frames` names any file with an `images` list (a ground-truth or prediction
//! file works) giving the original image sizes. `ensemble`, `evaluation`,
//! `tta_aggregation`, `positive_class` and `output_dir` are optional. Paths are
//! relative to the config file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ensemble::{EnsembleConfig, EnsembleError};
use crate::io::{parse_json, IoError};
use crate::metrics::{DEFAULT_MAX_DETS, POSITIVE_CLASS};
use crate::tta::{Aggregation, ViewTransform};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{}: unknown key(s): {}", path.display(), keys.join(", "))]
    UnknownKeys { path: PathBuf, keys: Vec<String> },
    #[error("{}: missing required key(s): {}", path.display(), keys.join(", "))]
    MissingKeys { path: PathBuf, keys: Vec<String> },
    #[error("{}: {message}", path.display())]
    Invalid { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", try_from = "RawGate")]
pub enum GateRule {
    /// Bleeding iff the positive class is strictly the most probable.
    Argmax,
    /// Bleeding iff the positive-class probability is at least `threshold`.
    Threshold { threshold: f64 },
}

// serde ignores extra fields on unit variants of tagged enums, so the rule
// is read through a flat struct instead.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGate {
    rule: String,
    threshold: Option<f64>,
}

impl TryFrom<RawGate> for GateRule {
    type Error = String;

    fn try_from(raw: RawGate) -> Result<Self, String> {
        match (raw.rule.as_str(), raw.threshold) {
            ("argmax", None) => Ok(GateRule::Argmax),
            ("argmax", Some(_)) => Err("gate rule \"argmax\" takes no threshold".into()),
            ("threshold", Some(threshold)) => Ok(GateRule::Threshold { threshold }),
            ("threshold", None) => Err("gate rule \"threshold\" needs a threshold".into()),
            (other, _) => Err(format!("unknown gate rule {other:?}, expected argmax or threshold")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewInput {
    pub view: ViewTransform,
    pub file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundingSource {
    pub source: String,
    pub views: Vec<ViewInput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub gt: PathBuf,
    #[serde(default)]
    pub mask: bool,
    #[serde(default)]
    pub cls_labels: Option<PathBuf>,
    #[serde(default = "default_max_dets")]
    pub max_dets: usize,
}

fn default_max_dets() -> usize {
    DEFAULT_MAX_DETS
}

fn default_positive_class() -> usize {
    POSITIVE_CLASS
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub frames: PathBuf,
    pub classification_inputs: Vec<ViewInput>,
    #[serde(default)]
    pub tta_aggregation: Aggregation,
    pub gate_rule: GateRule,
    #[serde(default = "default_positive_class")]
    pub positive_class: usize,
    pub grounding_inputs: Vec<GroundingSource>,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub evaluation: Option<EvaluationConfig>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Directory the relative paths above are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
    /// SHA-256 of the config file bytes.
    #[serde(skip)]
    pub digest: String,
}

const REQUIRED: [&str; 4] = ["frames", "classification_inputs", "gate_rule", "grounding_inputs"];
const OPTIONAL: [&str; 6] = [
    "tta_aggregation",
    "positive_class",
    "ensemble",
    "evaluation",
    "output_dir",
    "$schema",
];

impl PipelineConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    /// Every input file the config references, in a fixed order and without
    /// duplicates, as written in the config.
    pub fn input_files(&self) -> Vec<PathBuf> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        let mut add = |p: &PathBuf| {
            if seen.insert(p.clone()) {
                out.push(p.clone());
            }
        };
        add(&self.frames);
        self.classification_inputs.iter().for_each(|v| add(&v.file));
        for s in &self.grounding_inputs {
            s.views.iter().for_each(|v| add(&v.file));
        }
        if let Some(e) = &self.evaluation {
            add(&e.gt);
            if let Some(l) = &e.cls_labels {
                add(l);
            }
        }
        out
    }

    fn check(&self) -> Result<(), String> {
        if self.classification_inputs.is_empty() {
            return Err("classification_inputs must name at least one file".into());
        }
        if self.grounding_inputs.is_empty() {
            return Err("grounding_inputs must name at least one source".into());
        }
        let mut names = BTreeSet::new();
        for s in &self.grounding_inputs {
            if s.views.is_empty() {
                return Err(format!("grounding source {:?} has no views", s.source));
            }
            if !names.insert(&s.source) {
                return Err(format!("grounding source {:?} listed twice", s.source));
            }
        }
        if let GateRule::Threshold { threshold } = self.gate_rule {
            if !(threshold > 0.0 && threshold < 1.0) {
                return Err(format!("gate_rule.threshold must be in (0, 1), got {threshold}"));
            }
        }
        self.ensemble.validate().map_err(|e: EnsembleError| format!("ensemble: {e}"))?;
        Ok(())
    }
}

pub fn parse_config_bytes(path: &Path, bytes: &[u8]) -> Result<PipelineConfig, ConfigError> {
    let value: serde_json::Value = parse_json(path, bytes)?;
    let obj = value.as_object().ok_or_else(|| ConfigError::Invalid {
        path: path.to_path_buf(),
        message: "top level must be an object".into(),
    })?;
    let unknown: Vec<String> = obj
        .keys()
        .filter(|k| !REQUIRED.contains(&k.as_str()) && !OPTIONAL.contains(&k.as_str()))
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(ConfigError::UnknownKeys {
            path: path.to_path_buf(),
            keys: unknown,
        });
    }
    let missing: Vec<String> = REQUIRED
        .iter()
        .filter(|k| !obj.contains_key(**k))
        .map(|k| k.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(ConfigError::MissingKeys {
            path: path.to_path_buf(),
            keys: missing,
        });
    }
    let mut obj = obj.clone();
    obj.remove("$schema");
    let mut cfg: PipelineConfig =
        serde_json::from_value(serde_json::Value::Object(obj)).map_err(|e| ConfigError::Invalid {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    cfg.check().map_err(|message| ConfigError::Invalid {
        path: path.to_path_buf(),
        message,
    })?;
    cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    cfg.digest = hex::encode(Sha256::digest(bytes));
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<PipelineConfig, ConfigError> {
    let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
    parse_config_bytes(path, &bytes)
}
