//! Prediction and annotation data model shared by every stage.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::geometry::BoundingBox;
use crate::mask::BinaryMask;
use crate::validate::{ValidationReport, Violation};

/// Image identifier as it appears in the input files: either an integer or a string.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageId {
    Int(i64),
    Str(String),
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageId::Int(i) => write!(f, "{i}"),
            ImageId::Str(s) => f.write_str(s),
        }
    }
}

impl From<i64> for ImageId {
    fn from(v: i64) -> Self {
        ImageId::Int(v)
    }
}

impl From<&str> for ImageId {
    fn from(v: &str) -> Self {
        ImageId::Str(v.to_owned())
    }
}

pub type CategoryId = i64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub id: ImageId,
    pub width: u32,
    pub height: u32,
}

impl ImageMeta {
    pub fn new(id: impl Into<ImageId>, width: u32, height: u32) -> Self {
        Self {
            id: id.into(),
            width,
            height,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub score: f64,
    pub bbox: BoundingBox,
    pub mask: Option<BinaryMask>,
    pub source_id: String,
}

impl Detection {
    /// Total order used for every greedy pass: higher score first, then the
    /// smaller `(x1, y1, x2, y2)`, then the remaining fields so that distinct
    /// detections never compare equal.
    pub fn rank_cmp(&self, other: &Detection) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.bbox.lex_cmp(&other.bbox))
            .then_with(|| self.category_id.cmp(&other.category_id))
            .then_with(|| self.image_id.cmp(&other.image_id))
            .then_with(|| self.source_id.cmp(&other.source_id))
            .then_with(|| mask_cmp(self.mask.as_ref(), other.mask.as_ref()))
    }

    /// Output order of a [`DetectionSet`]: image, category, then rank.
    pub fn canonical_cmp(&self, other: &Detection) -> Ordering {
        self.image_id
            .cmp(&other.image_id)
            .then(self.category_id.cmp(&other.category_id))
            .then_with(|| self.rank_cmp(other))
    }
}

fn mask_cmp(a: Option<&BinaryMask>, b: Option<&BinaryMask>) -> Ordering {
    match (a, b) {
        (None, None) => Ordering::Equal,
        (None, Some(_)) => Ordering::Less,
        (Some(_), None) => Ordering::Greater,
        (Some(a), Some(b)) => (a.width(), a.height(), a.runs()).cmp(&(b.width(), b.height(), b.runs())),
    }
}

/// Ground-truth annotation. `id` defaults to the annotation's position in its file.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub id: u64,
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub bbox: BoundingBox,
    pub mask: Option<BinaryMask>,
}

/// Checks shared by detections and annotations against their image.
fn check_payload(
    what: &str,
    image: Option<&ImageMeta>,
    image_id: &ImageId,
    mask: Option<&BinaryMask>,
    report: &mut ValidationReport,
) {
    let Some(meta) = image else {
        report.push(Violation::new(what, format!("image_id {image_id} is not listed in images")));
        return;
    };
    if let Some(m) = mask {
        if m.width() != meta.width || m.height() != meta.height {
            report.push(Violation::new(
                what,
                format!(
                    "mask is {}x{} but image {} is {}x{}",
                    m.width(),
                    m.height(),
                    meta.id,
                    meta.width,
                    meta.height
                ),
            ));
        }
    }
}

pub(crate) fn index_images(
    images: &[ImageMeta],
    report: &mut ValidationReport,
) -> BTreeMap<ImageId, ImageMeta> {
    let mut by_id = BTreeMap::new();
    for (i, img) in images.iter().enumerate() {
        if img.width == 0 || img.height == 0 {
            report.push(Violation::new(
                format!("images[{i}]"),
                format!("image {} has zero size {}x{}", img.id, img.width, img.height),
            ));
        }
        if by_id.insert(img.id.clone(), img.clone()).is_some() {
            report.push(Violation::new(
                format!("images[{i}]"),
                format!("duplicate image id {}", img.id),
            ));
        }
    }
    by_id
}

fn clip_into_frame(what: &str, bbox: &mut BoundingBox, meta: &ImageMeta, report: &mut ValidationReport) {
    let (w, h) = (meta.width as f64, meta.height as f64);
    if bbox.is_within(w, h) {
        return;
    }
    match bbox.clip(w, h) {
        Ok(clipped) => {
            log::warn!(
                "{what}: box {:?} exceeds image {} ({}x{}), clipped to {:?}",
                bbox.corners(),
                meta.id,
                meta.width,
                meta.height,
                clipped.corners()
            );
            *bbox = clipped;
        }
        Err(_) => report.push(Violation::new(
            what,
            format!("box {:?} lies entirely outside image {}", bbox.corners(), meta.id),
        )),
    }
}

pub(crate) fn check_detection(
    what: &str,
    d: &mut Detection,
    by_id: &BTreeMap<ImageId, ImageMeta>,
    report: &mut ValidationReport,
) {
    if !(0.0..=1.0).contains(&d.score) {
        report.push(Violation::new(what, format!("score {} outside [0, 1]", d.score)));
    }
    let meta = by_id.get(&d.image_id);
    check_payload(what, meta, &d.image_id, d.mask.as_ref(), report);
    if let Some(meta) = meta {
        clip_into_frame(what, &mut d.bbox, meta, report);
    }
}

pub(crate) fn check_annotation(
    what: &str,
    a: &mut Annotation,
    by_id: &BTreeMap<ImageId, ImageMeta>,
    seen: &mut BTreeSet<u64>,
    report: &mut ValidationReport,
) {
    if !seen.insert(a.id) {
        report.push(Violation::new(what, format!("duplicate annotation id {}", a.id)));
    }
    let meta = by_id.get(&a.image_id);
    check_payload(what, meta, &a.image_id, a.mask.as_ref(), report);
    if let Some(meta) = meta {
        clip_into_frame(what, &mut a.bbox, meta, report);
    }
}

/// Scored predictions for a set of images.
///
/// Construction checks referential integrity, score range and mask size, and
/// clips boxes to their image frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    images: Vec<ImageMeta>,
    detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn new(images: Vec<ImageMeta>, mut detections: Vec<Detection>) -> Result<Self, ValidationReport> {
        let mut report = ValidationReport::default();
        let by_id = index_images(&images, &mut report);
        for (i, d) in detections.iter_mut().enumerate() {
            check_detection(&format!("detections[{i}]"), d, &by_id, &mut report);
        }
        report.into_result(Self { images, detections })
    }

    pub(crate) fn from_checked(images: Vec<ImageMeta>, detections: Vec<Detection>) -> Self {
        Self { images, detections }
    }

    pub fn empty(images: Vec<ImageMeta>) -> Result<Self, ValidationReport> {
        Self::new(images, Vec::new())
    }

    pub fn images(&self) -> &[ImageMeta] {
        &self.images
    }

    pub fn detections(&self) -> &[Detection] {
        &self.detections
    }

    pub fn image(&self, id: &ImageId) -> Option<&ImageMeta> {
        self.images.iter().find(|m| &m.id == id)
    }

    pub fn into_parts(self) -> (Vec<ImageMeta>, Vec<Detection>) {
        (self.images, self.detections)
    }

    /// Images sorted by id and detections in canonical order.
    pub fn canonicalized(mut self) -> Self {
        self.images.sort_by(|a, b| a.id.cmp(&b.id));
        self.detections.sort_by(Detection::canonical_cmp);
        self
    }

    /// Detections grouped by `(image, category)`, each group in rank order.
    pub fn groups(&self) -> BTreeMap<(ImageId, CategoryId), Vec<&Detection>> {
        let mut out: BTreeMap<(ImageId, CategoryId), Vec<&Detection>> = BTreeMap::new();
        for d in &self.detections {
            out.entry((d.image_id.clone(), d.category_id)).or_default().push(d);
        }
        for v in out.values_mut() {
            v.sort_by(|a, b| a.rank_cmp(b));
        }
        out
    }

    /// Same set with every detection's `source_id` replaced.
    pub fn with_source(mut self, source: &str) -> Self {
        for d in &mut self.detections {
            d.source_id = source.to_owned();
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    images: Vec<ImageMeta>,
    annotations: Vec<Annotation>,
}

impl GroundTruth {
    pub fn new(images: Vec<ImageMeta>, mut annotations: Vec<Annotation>) -> Result<Self, ValidationReport> {
        let mut report = ValidationReport::default();
        let by_id = index_images(&images, &mut report);
        let mut seen = BTreeSet::new();
        for (i, a) in annotations.iter_mut().enumerate() {
            check_annotation(&format!("annotations[{i}]"), a, &by_id, &mut seen, &mut report);
        }
        report.into_result(Self { images, annotations })
    }

    pub(crate) fn from_checked(images: Vec<ImageMeta>, annotations: Vec<Annotation>) -> Self {
        Self { images, annotations }
    }

    pub fn images(&self) -> &[ImageMeta] {
        &self.images
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(image: i64, score: f64, c: [f64; 4]) -> Detection {
        Detection {
            image_id: image.into(),
            category_id: 1,
            score,
            bbox: BoundingBox::new(c[0], c[1], c[2], c[3]).unwrap(),
            mask: None,
            source_id: "m".into(),
        }
    }

    #[test]
    fn rank_order_breaks_score_ties_by_corners() {
        let a = det(1, 0.5, [1.0, 0.0, 5.0, 5.0]);
        let b = det(1, 0.5, [0.0, 9.0, 5.0, 15.0]);
        let c = det(1, 0.7, [3.0, 3.0, 8.0, 8.0]);
        let mut v = vec![a.clone(), b.clone(), c.clone()];
        v.sort_by(Detection::rank_cmp);
        assert_eq!(v, vec![c, b, a]);
    }

    #[test]
    fn set_construction_reports_and_clips() {
        let images = vec![ImageMeta::new(1, 100, 50)];
        let ok = DetectionSet::new(images.clone(), vec![det(1, 0.3, [-4.0, 0.0, 20.0, 60.0])]).unwrap();
        assert_eq!(ok.detections()[0].bbox.corners(), [0.0, 0.0, 20.0, 50.0]);

        let err = DetectionSet::new(
            images.clone(),
            vec![det(1, 1.5, [0.0, 0.0, 1.0, 1.0]), det(2, 0.5, [0.0, 0.0, 1.0, 1.0])],
        )
        .unwrap_err();
        assert_eq!(err.violations().len(), 2);
        assert_eq!(err.violations()[0].item, "detections[0]");
        assert!(err.violations()[1].message.contains("not listed"));

        let mut d = det(1, 0.5, [0.0, 0.0, 1.0, 1.0]);
        d.mask = Some(BinaryMask::empty(10, 10).unwrap());
        let err = DetectionSet::new(images, vec![d]).unwrap_err();
        assert!(err.violations()[0].message.contains("mask is 10x10"));
    }

    #[test]
    fn image_ids_accept_ints_and_strings() {
        let ids: Vec<ImageId> = serde_json::from_str(r#"[3, "frame_001"]"#).unwrap();
        assert_eq!(ids, vec![ImageId::Int(3), ImageId::Str("frame_001".into())]);
        assert_eq!(serde_json::to_string(&ids).unwrap(), r#"[3,"frame_001"]"#);
    }
}
