//! JSON file formats and atomic file output.
//!
//! Prediction file:
//!
//! ```json
//! {
//!   "images": [{"id": 1, "width": 640, "height": 480}],
//!   "detections": [{"image_id": 1, "category_id": 1, "score": 0.91,
//!                   "bbox": [10.0, 20.0, 110.5, 96.0],
//!                   "mask": {"size": [480, 640], "runs": [...]},
//!                   "source_id": "convnext"}]
//! }
//! ```
//!
//! Ground truth uses `annotations` instead of `detections`, drops `score` and
//! `source_id`, and accepts an optional integer `id` per annotation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::geometry::BoundingBox;
use crate::mask::{BinaryMask, RawMask};
use crate::model::{
    check_annotation, check_detection, index_images, Annotation, CategoryId, Detection,
    DetectionSet, GroundTruth, ImageId, ImageMeta,
};
use crate::validate::{ValidationReport, Violation};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: line {line}, column {column}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
}

impl IoError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn path(&self) -> &Path {
        match self {
            IoError::Io { path, .. } | IoError::Parse { path, .. } => path,
        }
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    parse_json(path, &bytes)
}

pub fn parse_json<T: DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<T, IoError> {
    serde_json::from_slice(bytes).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("in-memory JSON serialization");
    out.push(b'\n');
    out
}

/// Writes through a temporary file in the target directory and renames it into
/// place, so readers never observe a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| IoError::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| IoError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| IoError::io(path, e))?;
    tmp.persist(path).map_err(|e| IoError::io(path, e.error))?;
    Ok(())
}

/// Writes several files all-or-nothing: every payload is staged next to its
/// target first and only renamed once all staging writes succeeded.
pub fn write_all_atomic(files: &[(PathBuf, Vec<u8>)]) -> Result<(), IoError> {
    let mut staged = Vec::with_capacity(files.len());
    for (path, bytes) in files {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| IoError::io(path, e))?;
        tmp.write_all(bytes).map_err(|e| IoError::io(path, e))?;
        tmp.as_file().sync_all().map_err(|e| IoError::io(path, e))?;
        staged.push((tmp, path));
    }
    for (tmp, path) in staged {
        tmp.persist(path).map_err(|e| IoError::io(path, e.error))?;
    }
    Ok(())
}

/// Accepts `640` as well as `640.0` for pixel dimensions.
fn de_dim<'de, D: Deserializer<'de>>(d: D) -> Result<u32, D::Error> {
    let v = f64::deserialize(d)?;
    if v.fract() != 0.0 || v < 0.0 || v > u32::MAX as f64 {
        return Err(serde::de::Error::custom(format!("expected a pixel count, got {v}")));
    }
    Ok(v as u32)
}

fn de_category<'de, D: Deserializer<'de>>(d: D) -> Result<CategoryId, D::Error> {
    let v = f64::deserialize(d)?;
    if v.fract() != 0.0 || v.abs() > 2f64.powi(53) {
        return Err(serde::de::Error::custom(format!("expected an integer category, got {v}")));
    }
    Ok(v as CategoryId)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: ImageId,
    #[serde(deserialize_with = "de_dim")]
    pub width: u32,
    #[serde(deserialize_with = "de_dim")]
    pub height: u32,
}

impl From<&ImageRecord> for ImageMeta {
    fn from(r: &ImageRecord) -> Self {
        ImageMeta::new(r.id.clone(), r.width, r.height)
    }
}

impl From<&ImageMeta> for ImageRecord {
    fn from(m: &ImageMeta) -> Self {
        ImageRecord {
            id: m.id.clone(),
            width: m.width,
            height: m.height,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: ImageId,
    #[serde(deserialize_with = "de_category")]
    pub category_id: CategoryId,
    pub score: f64,
    pub bbox: [f64; 4],
    #[serde(default)]
    pub mask: Option<RawMask>,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub image_id: ImageId,
    #[serde(deserialize_with = "de_category")]
    pub category_id: CategoryId,
    pub bbox: [f64; 4],
    #[serde(default)]
    pub mask: Option<RawMask>,
}

/// Parsed but unchecked prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub images: Vec<ImageRecord>,
    pub detections: Vec<DetectionRecord>,
}

/// Parsed but unchecked ground-truth file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
}

fn convert_geometry(
    what: &str,
    bbox: [f64; 4],
    mask: &Option<RawMask>,
    report: &mut ValidationReport,
) -> Option<(BoundingBox, Option<BinaryMask>)> {
    let b = BoundingBox::try_from(bbox)
        .map_err(|e| report.push(Violation::new(what, e.to_string())))
        .ok();
    let m = match mask {
        None => Some(None),
        Some(raw) => BinaryMask::try_from(raw.clone())
            .map(Some)
            .map_err(|e| report.push(Violation::new(what, format!("mask: {e}"))))
            .ok(),
    };
    Some((b?, m?))
}

impl PredictionFile {
    pub fn to_detection_set(&self) -> Result<DetectionSet, ValidationReport> {
        let mut report = ValidationReport::default();
        let images: Vec<ImageMeta> = self.images.iter().map(ImageMeta::from).collect();
        let by_id = index_images(&images, &mut report);
        let mut detections = Vec::with_capacity(self.detections.len());
        for (i, r) in self.detections.iter().enumerate() {
            let what = format!("detections[{i}]");
            let Some((bbox, mask)) = convert_geometry(&what, r.bbox, &r.mask, &mut report) else {
                continue;
            };
            let mut d = Detection {
                image_id: r.image_id.clone(),
                category_id: r.category_id,
                score: r.score,
                bbox,
                mask,
                source_id: r.source_id.clone(),
            };
            check_detection(&what, &mut d, &by_id, &mut report);
            detections.push(d);
        }
        report.into_result(DetectionSet::from_checked(images, detections))
    }

    pub fn from_detection_set(set: &DetectionSet) -> Self {
        PredictionFile {
            images: set.images().iter().map(ImageRecord::from).collect(),
            detections: set
                .detections()
                .iter()
                .map(|d| DetectionRecord {
                    image_id: d.image_id.clone(),
                    category_id: d.category_id,
                    score: d.score,
                    bbox: d.bbox.corners(),
                    mask: d.mask.clone().map(RawMask::from),
                    source_id: d.source_id.clone(),
                })
                .collect(),
        }
    }
}

impl GroundTruthFile {
    pub fn to_ground_truth(&self) -> Result<GroundTruth, ValidationReport> {
        let mut report = ValidationReport::default();
        let images: Vec<ImageMeta> = self.images.iter().map(ImageMeta::from).collect();
        let by_id = index_images(&images, &mut report);
        let mut seen = BTreeSet::new();
        let mut annotations = Vec::with_capacity(self.annotations.len());
        for (i, r) in self.annotations.iter().enumerate() {
            let what = format!("annotations[{i}]");
            let Some((bbox, mask)) = convert_geometry(&what, r.bbox, &r.mask, &mut report) else {
                continue;
            };
            let mut a = Annotation {
                id: r.id.unwrap_or(i as u64),
                image_id: r.image_id.clone(),
                category_id: r.category_id,
                bbox,
                mask,
            };
            check_annotation(&what, &mut a, &by_id, &mut seen, &mut report);
            annotations.push(a);
        }
        report.into_result(GroundTruth::from_checked(images, annotations))
    }

    pub fn from_ground_truth(gt: &GroundTruth) -> Self {
        GroundTruthFile {
            images: gt.images().iter().map(ImageRecord::from).collect(),
            annotations: gt
                .annotations()
                .iter()
                .map(|a| AnnotationRecord {
                    id: Some(a.id),
                    image_id: a.image_id.clone(),
                    category_id: a.category_id,
                    bbox: a.bbox.corners(),
                    mask: a.mask.clone().map(RawMask::from),
                })
                .collect(),
        }
    }
}

/// Error from reading a data file: either it could not be read/parsed, or it
/// parsed but is not well-formed.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{}: invalid contents:\n{report}", path.display())]
    Invalid {
        path: PathBuf,
        report: ValidationReport,
    },
}

pub fn load_predictions(path: &Path) -> Result<DetectionSet, LoadError> {
    let doc: PredictionFile = read_json(path)?;
    doc.to_detection_set().map_err(|report| LoadError::Invalid {
        path: path.to_path_buf(),
        report,
    })
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth, LoadError> {
    let doc: GroundTruthFile = read_json(path)?;
    doc.to_ground_truth().map_err(|report| LoadError::Invalid {
        path: path.to_path_buf(),
        report,
    })
}

pub fn prediction_bytes(set: &DetectionSet) -> Vec<u8> {
    to_json_bytes(&PredictionFile::from_detection_set(set))
}

/// One image's class-probability vector as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRecord {
    pub image_id: ImageId,
    pub probs: Vec<f64>,
}

/// Classification output file: `{"classes": [...], "outputs": [{"image_id", "probs"}]}`.
///
/// `classes` is optional and only used for labelling reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<String>>,
    pub outputs: Vec<ClassificationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub image_id: ImageId,
    pub class: usize,
}

/// Image-level class labels: `{"labels": [{"image_id", "class"}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelFile {
    pub labels: Vec<LabelRecord>,
}

impl LabelFile {
    pub fn to_map(&self) -> Result<BTreeMap<ImageId, usize>, ValidationReport> {
        let mut report = ValidationReport::default();
        let mut out = BTreeMap::new();
        for (i, l) in self.labels.iter().enumerate() {
            if out.insert(l.image_id.clone(), l.class).is_some() {
                report.push(Violation::new(
                    format!("labels[{i}]"),
                    format!("duplicate label for image {}", l.image_id),
                ));
            }
        }
        report.into_result(out)
    }
}
