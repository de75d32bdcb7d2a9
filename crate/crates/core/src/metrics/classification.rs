//! Image-level classification metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::model::ImageId;
use crate::tta::ClassificationOutput;

/// Class index of "bleeding" in two-class outputs.
pub const POSITIVE_CLASS: usize = 0;

/// Precision, recall and F1 in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn prf(tp: usize, fp: usize, fn_: usize) -> Prf {
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    Prf {
        precision: 100.0 * p,
        recall: 100.0 * r,
        f1: 100.0 * f1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub positive_class: usize,
    /// Scores for `positive_class` against the rest.
    pub positive: Prf,
    /// Unweighted mean of per-class precision, recall and F1.
    pub macro_avg: Prf,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

/// Accuracy plus positive-class and macro P/R/F1 from argmax decisions.
///
/// Every labeled image needs exactly one prediction; predictions for unlabeled
/// images are ignored.
pub fn classification_metrics(
    preds: &[ClassificationOutput],
    labels: &BTreeMap<ImageId, usize>,
    positive_class: usize,
) -> Result<ClassificationMetrics, MetricsError> {
    let mut by_image: BTreeMap<&ImageId, &ClassificationOutput> = BTreeMap::new();
    for p in preds {
        if by_image.insert(&p.image_id, p).is_some() {
            return Err(MetricsError::DuplicatePrediction(p.image_id.clone()));
        }
    }
    let arity = preds.first().map(|p| p.probs.len()).unwrap_or(0);
    let classes = arity.max(positive_class + 1);
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (id, &truth) in labels {
        let p = by_image.get(id).ok_or_else(|| MetricsError::MissingPrediction(id.clone()))?;
        if p.probs.len() != arity {
            return Err(MetricsError::ClassArity {
                image_id: id.clone(),
                expected: arity,
                got: p.probs.len(),
            });
        }
        if truth >= classes {
            return Err(MetricsError::LabelOutOfRange {
                image_id: id.clone(),
                class: truth,
                classes,
            });
        }
        confusion[truth][p.argmax()] += 1;
    }
    if labels.is_empty() {
        return Err(MetricsError::NoLabels);
    }
    let total: usize = labels.len();
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let per_class: Vec<Prf> = (0..classes)
        .map(|c| {
            let tp = confusion[c][c];
            let fp = (0..classes).map(|t| confusion[t][c]).sum::<usize>() - tp;
            let fn_ = confusion[c].iter().sum::<usize>() - tp;
            prf(tp, fp, fn_)
        })
        .collect();
    let n = classes as f64;
    Ok(ClassificationMetrics {
        accuracy: 100.0 * ratio(correct, total),
        positive_class,
        positive: per_class[positive_class],
        macro_avg: Prf {
            precision: per_class.iter().map(|s| s.precision).sum::<f64>() / n,
            recall: per_class.iter().map(|s| s.recall).sum::<f64>() / n,
            f1: per_class.iter().map(|s| s.f1).sum::<f64>() / n,
        },
        confusion,
    })
}
