//! Greedy non-maximum suppression.

use crate::geometry::box_iou;
use crate::model::{Detection, DetectionSet};

/// Greedy NMS over detections of one image and category.
///
/// Detections are visited in [`Detection::rank_cmp`] order and a detection is
/// kept iff its IoU with every already-kept detection is below
/// `iou_threshold`. The result is in rank order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| a.rank_cmp(b));
    let mut kept: Vec<&Detection> = Vec::new();
    for d in order {
        if kept.iter().all(|k| box_iou(&k.bbox, &d.bbox) < iou_threshold) {
            kept.push(d);
        }
    }
    kept.into_iter().cloned().collect()
}

/// NMS applied independently to every `(image, category)` group; output in
/// canonical order.
pub fn nms_set(set: &DetectionSet, iou_threshold: f64) -> DetectionSet {
    let kept: Vec<Detection> = set
        .groups()
        .into_values()
        .flat_map(|group| {
            let owned: Vec<Detection> = group.into_iter().cloned().collect();
            nms(&owned, iou_threshold)
        })
        .collect();
    DetectionSet::from_checked(set.images().to_vec(), kept).canonicalized()
}
