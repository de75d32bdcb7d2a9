//! Detection, segmentation and classification evaluation.

mod classification;
mod detection;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use classification::{classification_metrics, ClassificationMetrics, Prf, POSITIVE_CLASS};
pub use detection::{
    average_precision, average_recall, coco_summary, gt_categories, iou_thresholds, match_detections,
    CategoryScores, IouKind, MatchRecord, MatchResult, MetricBlock, DEFAULT_MAX_DETS, RECALL_POINTS,
};

use crate::model::{DetectionSet, GroundTruth, ImageId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("ground truth has no annotations")]
    EmptyGroundTruth,
    #[error("prediction image {0} is not in the ground truth")]
    UnknownImage(ImageId),
    #[error("image {image_id} is {}x{} in predictions but {}x{} in ground truth", pred.0, pred.1, gt.0, gt.1)]
    ImageSizeMismatch {
        image_id: ImageId,
        pred: (u32, u32),
        gt: (u32, u32),
    },
    #[error("mask evaluation requested but masks are missing on: {}", .0.join(", "))]
    MissingMasks(Vec<String>),
    #[error("no classification prediction for labeled image {0}")]
    MissingPrediction(ImageId),
    #[error("more than one classification prediction for image {0}")]
    DuplicatePrediction(ImageId),
    #[error("image {image_id}: expected {expected} class probabilities, got {got}")]
    ClassArity {
        image_id: ImageId,
        expected: usize,
        got: usize,
    },
    #[error("image {image_id}: label {class} outside 0..{classes}")]
    LabelOutOfRange {
        image_id: ImageId,
        class: usize,
        classes: usize,
    },
    #[error("no classification labels")]
    NoLabels,
}

/// Everything one evaluation run produces. Blocks are present only when the
/// corresponding inputs were supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub max_dets: usize,
    pub iou_thresholds: Vec<f64>,
    pub recall_points: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection: Option<MetricBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<MetricBlock>,
}

impl EvalReport {
    pub fn new(max_dets: usize) -> Self {
        Self {
            max_dets,
            iou_thresholds: iou_thresholds().to_vec(),
            recall_points: RECALL_POINTS,
            notes: Vec::new(),
            classification: None,
            detection: None,
            segmentation: None,
        }
    }

    /// Aligned plain-text tables: classification first (4 decimals), then the
    /// grounding rows (1 decimal).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "max_dets: {}", self.max_dets);
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        if let Some(c) = &self.classification {
            let _ = writeln!(s);
            let _ = writeln!(s, "{:<24}{:>12}{:>12}", "Classification", "positive", "macro");
            let _ = writeln!(s, "{:<24}{:>12.4}{:>12.4}", "Accuracy", c.accuracy, c.accuracy);
            for (name, p, m) in [
                ("Precision", c.positive.precision, c.macro_avg.precision),
                ("Recall", c.positive.recall, c.macro_avg.recall),
                ("F1-score", c.positive.f1, c.macro_avg.f1),
            ] {
                let _ = writeln!(s, "{name:<24}{p:>12.4}{m:>12.4}");
            }
        }
        if self.detection.is_some() || self.segmentation.is_some() {
            let _ = writeln!(s);
            let _ = writeln!(s, "{:<24}{:>12}{:>14}", "Grounding", "detection", "segmentation");
            let rows = |b: &Option<MetricBlock>| b.as_ref().map(|b| b.rows());
            let (d, g) = (rows(&self.detection), rows(&self.segmentation));
            let names = d.or(g).expect("one block present").map(|(n, _)| n);
            for (i, name) in names.iter().enumerate() {
                let cell = |r: &Option<[(&str, f64); 6]>| match r {
                    Some(r) => format!("{:.1}", r[i].1),
                    None => "-".to_owned(),
                };
                let _ = writeln!(s, "{name:<24}{:>12}{:>14}", cell(&d), cell(&g));
            }
        }
        s
    }
}

/// Box (and optionally mask) summary of predictions against ground truth.
pub fn evaluate_grounding(
    preds: &DetectionSet,
    gt: &GroundTruth,
    with_masks: bool,
    max_dets: usize,
    report: &mut EvalReport,
) -> Result<(), MetricsError> {
    report.detection = Some(coco_summary(preds, gt, IouKind::Box, max_dets)?);
    if with_masks {
        report.segmentation = Some(coco_summary(preds, gt, IouKind::Mask, max_dets)?);
    }
    Ok(())
}
