//! Fusion of detections from several source models.
//!
//! Detections of the same image and category are clustered greedily: visiting
//! them in rank order, each joins the first existing cluster whose seed (its
//! highest-ranked member) overlaps it at `cluster_iou` or more, otherwise it
//! seeds a new cluster. A strategy then decides which clusters survive based on
//! how many distinct sources they contain, and a merge mode turns each
//! surviving cluster into output detections.
//!
//! | strategy      | keeps clusters with             |
//! |---------------|---------------------------------|
//! | `affirmative` | any number of sources           |
//! | `consensus`   | at least `ceil(M / 2)` sources  |
//! | `unanimous`   | all `M` sources                 |

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{box_iou, BoundingBox};
use crate::mask::BinaryMask;
use crate::model::{CategoryId, Detection, DetectionSet, ImageId, ImageMeta};
use crate::nms::nms;

pub const ENSEMBLE_SOURCE: &str = "ensemble";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnsembleError {
    #[error("at least one source set is required")]
    NoSources,
    #[error("{name} must be in (0, 1], got {value}")]
    Threshold { name: &'static str, value: f64 },
    #[error("image {id} is {w1}x{h1} in source {s1} but {w2}x{h2} in source {s2}")]
    InconsistentImage {
        id: ImageId,
        s1: usize,
        w1: u32,
        h1: u32,
        s2: usize,
        w2: u32,
        h2: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Affirmative,
    Consensus,
    Unanimous,
}

impl Strategy {
    /// Minimum number of distinct sources a cluster needs out of `num_sources`.
    pub fn min_sources(&self, num_sources: usize) -> usize {
        match self {
            Strategy::Affirmative => 1,
            Strategy::Consensus => num_sources.div_ceil(2),
            Strategy::Unanimous => num_sources,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// NMS inside the cluster; may emit several boxes.
    #[default]
    Nms,
    /// One box: score-weighted mean of corners, max score, majority mask.
    WeightedAverage,
    /// One box: the highest-ranked member unchanged.
    MaxScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub strategy: Strategy,
    pub cluster_iou: f64,
    #[serde(rename = "merge")]
    pub merge_mode: MergeMode,
    pub nms_iou: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Affirmative,
            cluster_iou: 0.5,
            merge_mode: MergeMode::Nms,
            nms_iou: 0.5,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        for (name, value) in [("cluster_iou", self.cluster_iou), ("nms_iou", self.nms_iou)] {
            if !(value > 0.0 && value <= 1.0) {
                return Err(EnsembleError::Threshold { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub detection: Detection,
    /// Index of the source set the detection came from.
    pub source: usize,
}

/// Detections of one image and category grouped around a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// Rank order; the first member is the seed.
    pub members: Vec<Member>,
}

impl Cluster {
    pub fn seed(&self) -> &Detection {
        &self.members[0].detection
    }

    pub fn source_count(&self) -> usize {
        self.members.iter().map(|m| m.source).collect::<BTreeSet<_>>().len()
    }

    pub fn image_id(&self) -> &ImageId {
        &self.seed().image_id
    }

    pub fn category_id(&self) -> CategoryId {
        self.seed().category_id
    }
}

/// Union of the sources' images, checking that shared ids agree on size.
fn merged_images(sets: &[DetectionSet]) -> Result<Vec<ImageMeta>, EnsembleError> {
    let mut seen: BTreeMap<ImageId, (usize, ImageMeta)> = BTreeMap::new();
    for (s, set) in sets.iter().enumerate() {
        for m in set.images() {
            match seen.get(&m.id) {
                Some((s1, prev)) if (prev.width, prev.height) != (m.width, m.height) => {
                    return Err(EnsembleError::InconsistentImage {
                        id: m.id.clone(),
                        s1: *s1,
                        w1: prev.width,
                        h1: prev.height,
                        s2: s,
                        w2: m.width,
                        h2: m.height,
                    })
                }
                Some(_) => {}
                None => {
                    seen.insert(m.id.clone(), (s, m.clone()));
                }
            }
        }
    }
    Ok(seen.into_values().map(|(_, m)| m).collect())
}

fn cluster_group(mut members: Vec<Member>, cluster_iou: f64) -> Vec<Cluster> {
    members.sort_by(|a, b| a.detection.rank_cmp(&b.detection));
    let mut clusters: Vec<Cluster> = Vec::new();
    for m in members {
        match clusters
            .iter_mut()
            .find(|c| box_iou(&c.seed().bbox, &m.detection.bbox) >= cluster_iou)
        {
            Some(c) => c.members.push(m),
            None => clusters.push(Cluster { members: vec![m] }),
        }
    }
    clusters
}

fn grouped_members(sets: &[DetectionSet]) -> BTreeMap<(ImageId, CategoryId), Vec<Member>> {
    let mut groups: BTreeMap<(ImageId, CategoryId), Vec<Member>> = BTreeMap::new();
    for (source, set) in sets.iter().enumerate() {
        for d in set.detections() {
            groups
                .entry((d.image_id.clone(), d.category_id))
                .or_default()
                .push(Member {
                    detection: d.clone(),
                    source,
                });
        }
    }
    groups
}

/// Cluster all sources' detections, per image and category, in `(image,
/// category)` order and seed order within each group.
pub fn cluster_detections(sets: &[DetectionSet], cluster_iou: f64) -> Result<Vec<Cluster>, EnsembleError> {
    if sets.is_empty() {
        return Err(EnsembleError::NoSources);
    }
    merged_images(sets)?;
    Ok(grouped_members(sets)
        .into_values()
        .flat_map(|g| cluster_group(g, cluster_iou))
        .collect())
}

pub fn apply_strategy(clusters: Vec<Cluster>, strategy: Strategy, num_sources: usize) -> Vec<Cluster> {
    let need = strategy.min_sources(num_sources);
    clusters.into_iter().filter(|c| c.source_count() >= need).collect()
}

/// Pixelwise majority over masks of equal size; ties go to foreground.
fn majority_mask(masks: &[&BinaryMask]) -> Option<BinaryMask> {
    let first = masks.first()?;
    let (w, h) = (first.width(), first.height());
    if masks.iter().any(|m| (m.width(), m.height()) != (w, h)) {
        return None;
    }
    let mut counts = vec![0usize; w as usize * h as usize];
    for m in masks {
        for (c, p) in counts.iter_mut().zip(m.to_column_major()) {
            *c += p as usize;
        }
    }
    let n = masks.len();
    let bits: Vec<bool> = counts.into_iter().map(|c| 2 * c >= n).collect();
    BinaryMask::from_column_major(w, h, &bits).ok()
}

fn weighted_average(c: &Cluster) -> Detection {
    let seed = c.seed();
    let dets: Vec<&Detection> = c.members.iter().map(|m| &m.detection).collect();
    let total: f64 = dets.iter().map(|d| d.score).sum();
    let weight = |d: &Detection| {
        if total > 0.0 {
            d.score / total
        } else {
            1.0 / dets.len() as f64
        }
    };
    let mut corners = [0.0f64; 4];
    for d in &dets {
        let w = weight(d);
        for (acc, v) in corners.iter_mut().zip(d.bbox.corners()) {
            *acc += w * v;
        }
    }
    let bbox = BoundingBox::try_from(corners).unwrap_or(seed.bbox);
    let mask = if dets.iter().all(|d| d.mask.is_some()) {
        let masks: Vec<&BinaryMask> = dets.iter().filter_map(|d| d.mask.as_ref()).collect();
        majority_mask(&masks)
    } else {
        None
    };
    Detection {
        image_id: seed.image_id.clone(),
        category_id: seed.category_id,
        score: dets.iter().map(|d| d.score).fold(f64::NEG_INFINITY, f64::max),
        bbox,
        mask,
        source_id: seed.source_id.clone(),
    }
}

/// Turn one cluster into output detections.
pub fn merge_cluster(c: &Cluster, mode: MergeMode, nms_iou: f64) -> Vec<Detection> {
    if c.members.len() == 1 {
        return vec![c.seed().clone()];
    }
    match mode {
        MergeMode::Nms => {
            let dets: Vec<Detection> = c.members.iter().map(|m| m.detection.clone()).collect();
            nms(&dets, nms_iou)
        }
        MergeMode::WeightedAverage => vec![weighted_average(c)],
        MergeMode::MaxScore => vec![c.seed().clone()],
    }
}

/// Cluster, filter by strategy and merge. Output detections carry the source id
/// `"ensemble"` and come in canonical order; images are the union of all
/// sources' images sorted by id.
pub fn ensemble(sets: &[DetectionSet], cfg: &EnsembleConfig) -> Result<DetectionSet, EnsembleError> {
    if sets.is_empty() {
        return Err(EnsembleError::NoSources);
    }
    cfg.validate()?;
    let images = merged_images(sets)?;
    let need = cfg.strategy.min_sources(sets.len());
    let groups: Vec<Vec<Member>> = grouped_members(sets).into_values().collect();
    let per_group: Vec<Vec<Detection>> = groups
        .into_par_iter()
        .map(|g| {
            cluster_group(g, cfg.cluster_iou)
                .iter()
                .filter(|c| c.source_count() >= need)
                .flat_map(|c| merge_cluster(c, cfg.merge_mode, cfg.nms_iou))
                .collect()
        })
        .collect();
    let mut out: Vec<Detection> = per_group.into_iter().flatten().collect();
    for d in &mut out {
        d.source_id = ENSEMBLE_SOURCE.to_owned();
    }
    Ok(DetectionSet::from_checked(images, out).canonicalized())
}
