//! Box and mask AP/AR in the COCO style: greedy one-to-one matching per image
//! and category, 101-point interpolated precision, IoU thresholds
//! 0.50:0.05:0.95.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::geometry::box_iou;
use crate::mask::{mask_iou, MaskError};
use crate::model::{Annotation, CategoryId, Detection, DetectionSet, GroundTruth, ImageId};

pub const DEFAULT_MAX_DETS: usize = 100;
pub const RECALL_POINTS: usize = 101;

/// `0.50, 0.55, ..., 0.95`.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouKind {
    Box,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchRecord {
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub score: f64,
    /// Position within its image and category, 0 = highest ranked.
    pub rank: usize,
    pub matched: bool,
    pub matched_annotation: Option<u64>,
}

/// Outcome of matching at one IoU threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchResult {
    pub iou_threshold: f64,
    pub kind: IouKind,
    pub records: Vec<MatchRecord>,
    pub gt_per_category: BTreeMap<CategoryId, usize>,
}

impl MatchResult {
    pub fn total_gt(&self) -> usize {
        self.gt_per_category.values().sum()
    }

    pub fn true_positives(&self) -> usize {
        self.records.iter().filter(|r| r.matched).count()
    }

    pub fn false_positives(&self) -> usize {
        self.records.len() - self.true_positives()
    }

    pub fn false_negatives(&self) -> usize {
        self.total_gt() - self.true_positives()
    }

    pub fn for_category(&self, category: CategoryId) -> MatchResult {
        MatchResult {
            iou_threshold: self.iou_threshold,
            kind: self.kind,
            records: self.records.iter().filter(|r| r.category_id == category).cloned().collect(),
            gt_per_category: self
                .gt_per_category
                .get(&category)
                .map(|&n| BTreeMap::from([(category, n)]))
                .unwrap_or_default(),
        }
    }

    /// Keep only the `max_dets` highest-ranked detections per image and category.
    pub fn truncated(&self, max_dets: usize) -> MatchResult {
        MatchResult {
            records: self.records.iter().filter(|r| r.rank < max_dets).cloned().collect(),
            ..self.clone()
        }
    }
}

/// Ranking of records across images: score descending, then image id, then
/// in-image rank.
fn global_order(a: &MatchRecord, b: &MatchRecord) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.image_id.cmp(&b.image_id))
        .then(a.category_id.cmp(&b.category_id))
        .then(a.rank.cmp(&b.rank))
}

/// 101-point interpolated average precision; `None` when there is no ground
/// truth.
///
/// Recall points are `r = i / 100`; a cutoff reaches `r` when
/// `100 * tp >= i * total_gt`, compared in integers.
pub fn average_precision(m: &MatchResult) -> Option<f64> {
    let npig = m.total_gt();
    if npig == 0 {
        return None;
    }
    let mut order: Vec<&MatchRecord> = m.records.iter().collect();
    order.sort_by(|a, b| global_order(a, b));
    let mut tp = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let mut hits = 0usize;
    for (i, r) in order.iter().enumerate() {
        hits += r.matched as usize;
        tp.push(hits);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let sum: f64 = (0..RECALL_POINTS)
        .map(|i| {
            let idx = tp.partition_point(|&t| 100 * t < i * npig);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    Some(sum / RECALL_POINTS as f64)
}

/// Recall using at most `max_dets` detections per image and category.
pub fn average_recall(m: &MatchResult, max_dets: usize) -> Option<f64> {
    let npig = m.total_gt();
    if npig == 0 {
        return None;
    }
    let hits = m.records.iter().filter(|r| r.matched && r.rank < max_dets).count();
    Some(hits as f64 / npig as f64)
}

/// Predictions and annotations of one image and category with their pairwise
/// IoUs, computed once and matched at any threshold.
struct Group<'a> {
    preds: Vec<&'a Detection>,
    gts: Vec<&'a Annotation>,
    /// `ious[p][g]`
    ious: Vec<Vec<f64>>,
}

impl Group<'_> {
    fn matches(&self, threshold: f64) -> Vec<Option<usize>> {
        let mut taken = vec![false; self.gts.len()];
        self.preds
            .iter()
            .enumerate()
            .map(|(p, _)| {
                let mut best: Option<(usize, f64)> = None;
                for (g, &iou) in self.ious[p].iter().enumerate() {
                    if taken[g] || iou < threshold {
                        continue;
                    }
                    if best.is_none_or(|(_, b)| iou > b) {
                        best = Some((g, iou));
                    }
                }
                best.map(|(g, _)| {
                    taken[g] = true;
                    g
                })
            })
            .collect()
    }
}

fn pair_iou(d: &Detection, a: &Annotation, kind: IouKind) -> f64 {
    match kind {
        IouKind::Box => box_iou(&d.bbox, &a.bbox),
        IouKind::Mask => {
            let (Some(dm), Some(am)) = (&d.mask, &a.mask) else {
                return 0.0;
            };
            // two empty masks do not overlap
            match mask_iou(dm, am) {
                Ok(v) => v,
                Err(MaskError::UndefinedOverlap) => 0.0,
                Err(_) => 0.0,
            }
        }
    }
}

/// IoU-matched groups, in `(image, category)` order, plus GT counts.
pub(crate) struct Prepared<'a> {
    kind: IouKind,
    groups: Vec<Group<'a>>,
    gt_per_category: BTreeMap<CategoryId, usize>,
}

fn check_inputs(preds: &DetectionSet, gt: &GroundTruth, kind: IouKind) -> Result<(), MetricsError> {
    let gt_images: BTreeMap<&ImageId, (u32, u32)> =
        gt.images().iter().map(|m| (&m.id, (m.width, m.height))).collect();
    for m in preds.images() {
        match gt_images.get(&m.id) {
            None => return Err(MetricsError::UnknownImage(m.id.clone())),
            Some(&dims) if dims != (m.width, m.height) => {
                return Err(MetricsError::ImageSizeMismatch {
                    image_id: m.id.clone(),
                    pred: (m.width, m.height),
                    gt: dims,
                })
            }
            Some(_) => {}
        }
    }
    if kind == IouKind::Mask {
        let mut missing: Vec<String> = preds
            .detections()
            .iter()
            .enumerate()
            .filter(|(_, d)| d.mask.is_none())
            .map(|(i, _)| format!("detections[{i}]"))
            .collect();
        missing.extend(
            gt.annotations()
                .iter()
                .filter(|a| a.mask.is_none())
                .map(|a| format!("annotation {}", a.id)),
        );
        if !missing.is_empty() {
            return Err(MetricsError::MissingMasks(missing));
        }
    }
    Ok(())
}

type Bucket<'a> = (Vec<&'a Detection>, Vec<&'a Annotation>);

pub(crate) fn prepare<'a>(
    preds: &'a DetectionSet,
    gt: &'a GroundTruth,
    kind: IouKind,
) -> Result<Prepared<'a>, MetricsError> {
    check_inputs(preds, gt, kind)?;
    let mut keyed: BTreeMap<(ImageId, CategoryId), Bucket<'a>> = BTreeMap::new();
    for d in preds.detections() {
        keyed.entry((d.image_id.clone(), d.category_id)).or_default().0.push(d);
    }
    let mut gt_per_category = BTreeMap::new();
    for a in gt.annotations() {
        keyed.entry((a.image_id.clone(), a.category_id)).or_default().1.push(a);
        *gt_per_category.entry(a.category_id).or_insert(0) += 1;
    }
    let groups = keyed
        .into_values()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(mut p, g)| {
            p.sort_by(|a, b| a.rank_cmp(b));
            let ious = p
                .iter()
                .map(|d| g.iter().map(|a| pair_iou(d, a, kind)).collect())
                .collect();
            Group { preds: p, gts: g, ious }
        })
        .collect();
    Ok(Prepared {
        kind,
        groups,
        gt_per_category,
    })
}

impl Prepared<'_> {
    pub(crate) fn at(&self, threshold: f64) -> MatchResult {
        let mut records = Vec::new();
        for g in &self.groups {
            for (rank, (d, m)) in g.preds.iter().zip(g.matches(threshold)).enumerate() {
                records.push(MatchRecord {
                    image_id: d.image_id.clone(),
                    category_id: d.category_id,
                    score: d.score,
                    rank,
                    matched: m.is_some(),
                    matched_annotation: m.map(|i| g.gts[i].id),
                });
            }
        }
        MatchResult {
            iou_threshold: threshold,
            kind: self.kind,
            records,
            gt_per_category: self.gt_per_category.clone(),
        }
    }
}

/// Greedy matching at one threshold. Predictions are visited in rank order per
/// image and category; each takes the unmatched annotation with the highest
/// IoU at or above the threshold (the earlier annotation on equal IoU).
pub fn match_detections(
    preds: &DetectionSet,
    gt: &GroundTruth,
    iou_threshold: f64,
    kind: IouKind,
) -> Result<MatchResult, MetricsError> {
    Ok(prepare(preds, gt, kind)?.at(iou_threshold))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScores {
    pub ap_50_95: f64,
    pub ap_50: f64,
    pub ar_50_95: f64,
    pub ar_50: f64,
}

/// One column of the grounding table, in percent.
///
/// `map_*` and `ar_*` average per-category values over categories that have
/// ground truth. `ap_*` is class-agnostic: all categories are pooled into one
/// before matching. With a single category the two coincide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    #[serde(rename = "mAP@0.5:0.95")]
    pub map_50_95: f64,
    #[serde(rename = "mAP@0.5")]
    pub map_50: f64,
    #[serde(rename = "AP@0.5:0.95")]
    pub ap_50_95: f64,
    #[serde(rename = "AP@0.5")]
    pub ap_50: f64,
    #[serde(rename = "AR@0.5:0.95")]
    pub ar_50_95: f64,
    #[serde(rename = "AR@0.5")]
    pub ar_50: f64,
    pub per_category: BTreeMap<CategoryId, CategoryScores>,
}

impl MetricBlock {
    pub fn rows(&self) -> [(&'static str, f64); 6] {
        [
            ("mAP@0.5:0.95", self.map_50_95),
            ("mAP@0.5", self.map_50),
            ("AP@0.5:0.95", self.ap_50_95),
            ("AP@0.5", self.ap_50),
            ("AR@0.5:0.95", self.ar_50_95),
            ("AR@0.5", self.ar_50),
        ]
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Per-threshold AP and AR for every category with ground truth.
fn per_category(
    prepared: &Prepared<'_>,
    max_dets: usize,
) -> BTreeMap<CategoryId, (Vec<f64>, Vec<f64>)> {
    let mut out: BTreeMap<CategoryId, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for t in iou_thresholds() {
        let m = prepared.at(t).truncated(max_dets);
        for &c in prepared.gt_per_category.keys() {
            let mc = m.for_category(c);
            let e = out.entry(c).or_default();
            e.0.push(average_precision(&mc).expect("category has ground truth"));
            e.1.push(average_recall(&mc, max_dets).expect("category has ground truth"));
        }
    }
    out
}

fn single_category(preds: &DetectionSet, gt: &GroundTruth) -> (DetectionSet, GroundTruth) {
    let (images, mut dets) = preds.clone().into_parts();
    for d in &mut dets {
        d.category_id = 0;
    }
    let mut anns = gt.annotations().to_vec();
    for a in &mut anns {
        a.category_id = 0;
    }
    (
        DetectionSet::from_checked(images, dets),
        GroundTruth::from_checked(gt.images().to_vec(), anns),
    )
}

/// The six grounding rows for one IoU kind, in percent.
pub fn coco_summary(
    preds: &DetectionSet,
    gt: &GroundTruth,
    kind: IouKind,
    max_dets: usize,
) -> Result<MetricBlock, MetricsError> {
    if gt.annotations().is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let prepared = prepare(preds, gt, kind)?;
    let cats = per_category(&prepared, max_dets);

    let (p1, g1) = single_category(preds, gt);
    let pooled = per_category(&prepare(&p1, &g1, kind)?, max_dets);
    let (pooled_ap, _) = &pooled[&0];

    let per_category: BTreeMap<CategoryId, CategoryScores> = cats
        .iter()
        .map(|(&c, (ap, ar))| {
            (
                c,
                CategoryScores {
                    ap_50_95: 100.0 * mean(ap.iter().copied()),
                    ap_50: 100.0 * ap[0],
                    ar_50_95: 100.0 * mean(ar.iter().copied()),
                    ar_50: 100.0 * ar[0],
                },
            )
        })
        .collect();
    Ok(MetricBlock {
        map_50_95: mean(per_category.values().map(|s| s.ap_50_95)),
        map_50: mean(per_category.values().map(|s| s.ap_50)),
        ap_50_95: 100.0 * mean(pooled_ap.iter().copied()),
        ap_50: 100.0 * pooled_ap[0],
        ar_50_95: mean(per_category.values().map(|s| s.ar_50_95)),
        ar_50: mean(per_category.values().map(|s| s.ar_50)),
        per_category,
    })
}

/// Categories that have ground truth.
pub fn gt_categories(gt: &GroundTruth) -> BTreeSet<CategoryId> {
    gt.annotations().iter().map(|a| a.category_id).collect()
}
