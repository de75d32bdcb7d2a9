//! Well-formedness checks for prediction and ground-truth documents.
//!
//! [`validate_predictions`] and [`validate_ground_truth`] never fail; they
//! collect every problem into a [`ValidationReport`], which is empty exactly
//! when the document converts into a [`DetectionSet`](crate::DetectionSet) or
//! [`GroundTruth`](crate::GroundTruth).

use std::fmt;

use serde::Serialize;

use crate::io::{GroundTruthFile, PredictionFile};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// Path-like locator, e.g. `detections[3]`.
    pub item: String,
    pub message: String,
}

impl Violation {
    pub fn new(item: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            item: item.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.item, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn push(&mut self, v: Violation) {
        self.violations.push(v);
    }

    pub fn extend(&mut self, other: ValidationReport) {
        self.violations.extend(other.violations);
    }

    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }

    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub(crate) fn into_result<T>(self, value: T) -> Result<T, ValidationReport> {
        if self.is_empty() {
            Ok(value)
        } else {
            Err(self)
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationReport {}

pub fn validate_predictions(doc: &PredictionFile) -> ValidationReport {
    match doc.to_detection_set() {
        Ok(_) => ValidationReport::default(),
        Err(r) => r,
    }
}

pub fn validate_ground_truth(doc: &GroundTruthFile) -> ValidationReport {
    match doc.to_ground_truth() {
        Ok(_) => ValidationReport::default(),
        Err(r) => r,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> PredictionFile {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn well_formed_is_empty() {
        let doc = parse(
            r#"{"images":[{"id":1,"width":4,"height":4}],
                "detections":[{"image_id":1,"category_id":1,"score":0.9,"bbox":[0,0,2,2],
                               "mask":{"size":[4,4],"runs":[0,2,14]},"source_id":"a"}]}"#,
        );
        assert!(validate_predictions(&doc).is_empty());
    }

    #[test]
    fn score_out_of_range() {
        let doc = parse(
            r#"{"images":[{"id":1,"width":4,"height":4}],
                "detections":[{"image_id":1,"category_id":1,"score":1.5,"bbox":[0,0,2,2],"mask":null,"source_id":"a"}]}"#,
        );
        let r = validate_predictions(&doc);
        assert_eq!(r.violations().len(), 1);
        assert_eq!(r.violations()[0].item, "detections[0]");
        assert!(r.violations()[0].message.contains("score"));
    }

    #[test]
    fn bad_run_sum() {
        let doc = parse(
            r#"{"images":[{"id":1,"width":4,"height":4}],
                "detections":[{"image_id":1,"category_id":1,"score":0.5,"bbox":[0,0,2,2],
                               "mask":{"size":[4,4],"runs":[3,2]},"source_id":"a"}]}"#,
        );
        let r = validate_predictions(&doc);
        assert_eq!(r.violations().len(), 1);
        assert!(r.violations()[0].message.contains("runs sum to 5"));
    }

    #[test]
    fn collects_everything() {
        let doc = parse(
            r#"{"images":[{"id":1,"width":4,"height":4},{"id":1,"width":4,"height":4}],
                "detections":[
                  {"image_id":7,"category_id":1,"score":0.5,"bbox":[0,0,2,2],"mask":null,"source_id":"a"},
                  {"image_id":1,"category_id":1,"score":0.5,"bbox":[3,0,2,2],"mask":null,"source_id":"a"}]}"#,
        );
        let r = validate_predictions(&doc);
        let items: Vec<_> = r.violations().iter().map(|v| v.item.as_str()).collect();
        assert_eq!(items, vec!["images[1]", "detections[0]", "detections[1]"]);
    }

    #[test]
    fn ground_truth_checks() {
        let doc: GroundTruthFile = serde_json::from_str(
            r#"{"images":[{"id":"a","width":4,"height":4}],
                "annotations":[{"image_id":"a","category_id":1,"bbox":[0,0,2,2]},
                               {"image_id":"b","category_id":1,"bbox":[0,0,2,2]}]}"#,
        )
        .unwrap();
        let r = validate_ground_truth(&doc);
        assert_eq!(r.violations().len(), 1);
        assert_eq!(r.violations()[0].item, "annotations[1]");
    }
}
