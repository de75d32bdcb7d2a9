//! Test-time augmentation: geometric views, their exact inverses, and
//! aggregation of per-view outputs.
//!
//! A view is one of the invertible transforms in [`ViewTransform`]. Rotations
//! are clockwise, so `rot90` maps a `W x H` frame to `H x W` and the continuous
//! point `(x, y)` to `(H - y, x)`.
//!
//! Flips and rotations only ever compute `D - v` for a frame dimension `D`. The
//! round trip `D - (D - v)` gives back `v` bit-exactly whenever `D - v` is
//! representable, which holds for all coordinates on a dyadic sub-pixel grid
//! (integers, halves, ..., `1/2^k` pixels); decimal coordinates such as `10.3`
//! may come back one ULP of `D` away. Scale views divide by the factor on the
//! way back and are exact only up to rounding.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BoundingBox, GeometryError};
use crate::mask::{BinaryMask, MaskError};
use crate::model::{Detection, DetectionSet, ImageId, ImageMeta};
use crate::validate::ValidationReport;

#[derive(Debug, Error)]
pub enum TtaError {
    #[error("scale factor must be finite and positive, got {0}")]
    InvalidScale(f64),
    #[error("unknown transform kind {0:?}")]
    UnknownKind(String),
    #[error("no classification outputs to aggregate")]
    Empty,
    #[error("class arity mismatch: expected {expected}, got {got} for image {image_id}")]
    ArityMismatch {
        image_id: ImageId,
        expected: usize,
        got: usize,
    },
    #[error("outputs for different images ({0} and {1}) cannot be aggregated together")]
    MixedImages(ImageId, ImageId),
    #[error("invalid probability vector for image {image_id}: {reason}")]
    InvalidProbs { image_id: ImageId, reason: String },
    #[error("no original frame for image {0}")]
    UnknownFrame(ImageId),
    #[error("view {view} of image {image_id} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    FrameMismatch {
        view: String,
        image_id: ImageId,
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("image {image_id}: {source}")]
    Mask {
        image_id: ImageId,
        #[source]
        source: MaskError,
    },
    #[error("image {image_id}: mapped box is empty after clipping: {source}")]
    Box {
        image_id: ImageId,
        #[source]
        source: GeometryError,
    },
    #[error("pooled views are inconsistent:\n{0}")]
    Invalid(ValidationReport),
}

/// A geometric test-time view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ViewSpec", into = "ViewSpec")]
pub enum ViewTransform {
    Identity,
    HFlip,
    VFlip,
    Rot90,
    Rot180,
    Rot270,
    Scale(f64),
}

/// Config/wire form: `{"kind": "rot90"}` or `{"kind": "scale", "scale_factor": 1.5}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSpec {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_factor: Option<f64>,
}

impl TryFrom<ViewSpec> for ViewTransform {
    type Error = TtaError;

    fn try_from(spec: ViewSpec) -> Result<Self, TtaError> {
        let t = match spec.kind.as_str() {
            "identity" => ViewTransform::Identity,
            "hflip" => ViewTransform::HFlip,
            "vflip" => ViewTransform::VFlip,
            "rot90" => ViewTransform::Rot90,
            "rot180" => ViewTransform::Rot180,
            "rot270" => ViewTransform::Rot270,
            "scale" => {
                return ViewTransform::scale(spec.scale_factor.ok_or(TtaError::InvalidScale(f64::NAN))?)
            }
            other => return Err(TtaError::UnknownKind(other.to_owned())),
        };
        if spec.scale_factor.is_some() {
            return Err(TtaError::UnknownKind(format!("{} with scale_factor", spec.kind)));
        }
        Ok(t)
    }
}

impl From<ViewTransform> for ViewSpec {
    fn from(t: ViewTransform) -> Self {
        let (kind, scale_factor) = match t {
            ViewTransform::Scale(f) => ("scale", Some(f)),
            other => (other.kind(), None),
        };
        ViewSpec {
            kind: kind.to_owned(),
            scale_factor,
        }
    }
}

impl fmt::Display for ViewTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViewTransform::Scale(s) => write!(f, "scale{s}"),
            other => f.write_str(other.kind()),
        }
    }
}

impl ViewTransform {
    /// The six transforms that permute pixels.
    pub const DISCRETE: [ViewTransform; 6] = [
        ViewTransform::Identity,
        ViewTransform::HFlip,
        ViewTransform::VFlip,
        ViewTransform::Rot90,
        ViewTransform::Rot180,
        ViewTransform::Rot270,
    ];

    pub fn scale(factor: f64) -> Result<Self, TtaError> {
        if factor.is_finite() && factor > 0.0 {
            Ok(ViewTransform::Scale(factor))
        } else {
            Err(TtaError::InvalidScale(factor))
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ViewTransform::Identity => "identity",
            ViewTransform::HFlip => "hflip",
            ViewTransform::VFlip => "vflip",
            ViewTransform::Rot90 => "rot90",
            ViewTransform::Rot180 => "rot180",
            ViewTransform::Rot270 => "rot270",
            ViewTransform::Scale(_) => "scale",
        }
    }

    fn swaps_axes(&self) -> bool {
        matches!(self, ViewTransform::Rot90 | ViewTransform::Rot270)
    }

    /// Integer size of the transformed frame. Scaled frames round to the
    /// nearest pixel and never shrink below one.
    pub fn frame_size(&self, width: u32, height: u32) -> (u32, u32) {
        match self {
            ViewTransform::Scale(s) => (scaled_dim(width, *s), scaled_dim(height, *s)),
            t if t.swaps_axes() => (height, width),
            _ => (width, height),
        }
    }

    pub fn transformed_frame(&self, frame: &ImageMeta) -> ImageMeta {
        let (w, h) = self.frame_size(frame.width, frame.height);
        ImageMeta::new(frame.id.clone(), w, h)
    }

    /// Where pixel `(x, y)` of the original frame lands. Only meaningful for the
    /// discrete transforms.
    fn pixel_forward(&self, x: u32, y: u32, width: u32, height: u32) -> (u32, u32) {
        match self {
            ViewTransform::Identity | ViewTransform::Scale(_) => (x, y),
            ViewTransform::HFlip => (width - 1 - x, y),
            ViewTransform::VFlip => (x, height - 1 - y),
            ViewTransform::Rot90 => (height - 1 - y, x),
            ViewTransform::Rot180 => (width - 1 - x, height - 1 - y),
            ViewTransform::Rot270 => (y, width - 1 - x),
        }
    }
}

fn scaled_dim(d: u32, s: f64) -> u32 {
    ((d as f64 * s).round()).clamp(1.0, u32::MAX as f64) as u32
}

fn make_box(c: [f64; 4]) -> BoundingBox {
    BoundingBox::new(c[0], c[1], c[2], c[3]).expect("transform of a valid box is valid")
}

/// Map a box from the original frame into the view's frame.
pub fn forward_box(b: &BoundingBox, t: ViewTransform, frame: &ImageMeta) -> BoundingBox {
    let (w, h) = (frame.width as f64, frame.height as f64);
    let [x1, y1, x2, y2] = b.corners();
    make_box(match t {
        ViewTransform::Identity => [x1, y1, x2, y2],
        ViewTransform::HFlip => [w - x2, y1, w - x1, y2],
        ViewTransform::VFlip => [x1, h - y2, x2, h - y1],
        ViewTransform::Rot90 => [h - y2, x1, h - y1, x2],
        ViewTransform::Rot180 => [w - x2, h - y2, w - x1, h - y1],
        ViewTransform::Rot270 => [y1, w - x2, y2, w - x1],
        ViewTransform::Scale(s) => [x1 * s, y1 * s, x2 * s, y2 * s],
    })
}

/// Map a box predicted on the view back into the original frame.
pub fn invert_box(b: &BoundingBox, t: ViewTransform, original: &ImageMeta) -> BoundingBox {
    let (w, h) = (original.width as f64, original.height as f64);
    let [a1, b1, a2, b2] = b.corners();
    make_box(match t {
        ViewTransform::Identity => [a1, b1, a2, b2],
        ViewTransform::HFlip => [w - a2, b1, w - a1, b2],
        ViewTransform::VFlip => [a1, h - b2, a2, h - b1],
        ViewTransform::Rot90 => [b1, h - a2, b2, h - a1],
        ViewTransform::Rot180 => [w - a2, h - b2, w - a1, h - b1],
        ViewTransform::Rot270 => [w - b2, a1, w - b1, a2],
        ViewTransform::Scale(s) => [a1 / s, b1 / s, a2 / s, b2 / s],
    })
}

/// Nearest-neighbour source index when resampling `from` pixels onto `to`.
fn nearest(i: u32, to: u32, from: u32) -> u32 {
    // floor((i + 0.5) * from / to) in integers
    let v = ((2 * i as u64 + 1) * from as u64) / (2 * to as u64);
    (v as u32).min(from - 1)
}

/// Render a mask in the view's frame.
pub fn forward_mask(m: &BinaryMask, t: ViewTransform) -> BinaryMask {
    let (w, h) = (m.width(), m.height());
    let (tw, th) = t.frame_size(w, h);
    let src = m.to_column_major();
    let mut dst = vec![false; tw as usize * th as usize];
    match t {
        ViewTransform::Scale(_) => {
            for x in 0..tw {
                let sx = nearest(x, tw, w);
                for y in 0..th {
                    let sy = nearest(y, th, h);
                    dst[(x * th + y) as usize] = src[(sx * h + sy) as usize];
                }
            }
        }
        _ => {
            for x in 0..w {
                for y in 0..h {
                    let (fx, fy) = t.pixel_forward(x, y, w, h);
                    dst[(fx * th + fy) as usize] = src[(x * h + y) as usize];
                }
            }
        }
    }
    BinaryMask::from_column_major(tw, th, &dst).expect("dimensions are consistent")
}

/// Bring a mask predicted on the view back to the original frame. Discrete
/// transforms are pixel-exact; scale views resample with nearest neighbour.
pub fn invert_mask(
    m: &BinaryMask,
    t: ViewTransform,
    original: &ImageMeta,
) -> Result<BinaryMask, MaskError> {
    let (w, h) = (original.width, original.height);
    let (tw, th) = t.frame_size(w, h);
    if m.width() != tw || m.height() != th {
        return Err(MaskError::DimensionMismatch(m.width(), m.height(), tw, th));
    }
    let src = m.to_column_major();
    let mut out = vec![false; w as usize * h as usize];
    for x in 0..w {
        for y in 0..h {
            let (sx, sy) = match t {
                ViewTransform::Scale(_) => (nearest(x, w, tw), nearest(y, h, th)),
                _ => t.pixel_forward(x, y, w, h),
            };
            out[(x * h + y) as usize] = src[(sx * th + sy) as usize];
        }
    }
    BinaryMask::from_column_major(w, h, &out)
}

/// Pool several views of the same model into one set in the original frames.
///
/// Every detection is inverse-mapped and tagged `"<source>@<view>"` (identity
/// views keep their source id). Scores are unchanged and nothing is
/// deduplicated; that is left to NMS or the ensemble.
pub fn pool_views(
    per_view: &[(ViewTransform, DetectionSet)],
    original_frames: &[ImageMeta],
) -> Result<DetectionSet, TtaError> {
    let frames: BTreeMap<&ImageId, &ImageMeta> = original_frames.iter().map(|f| (&f.id, f)).collect();
    let mut pooled = Vec::new();
    for (t, set) in per_view {
        for meta in set.images() {
            let frame = frames
                .get(&meta.id)
                .ok_or_else(|| TtaError::UnknownFrame(meta.id.clone()))?;
            let (want_w, want_h) = t.frame_size(frame.width, frame.height);
            if (meta.width, meta.height) != (want_w, want_h) {
                return Err(TtaError::FrameMismatch {
                    view: t.to_string(),
                    image_id: meta.id.clone(),
                    got_w: meta.width,
                    got_h: meta.height,
                    want_w,
                    want_h,
                });
            }
        }
        for d in set.detections() {
            let frame = *frames
                .get(&d.image_id)
                .ok_or_else(|| TtaError::UnknownFrame(d.image_id.clone()))?;
            let bbox = invert_box(&d.bbox, *t, frame)
                .clip(frame.width as f64, frame.height as f64)
                .map_err(|source| TtaError::Box {
                    image_id: d.image_id.clone(),
                    source,
                })?;
            let mask = d
                .mask
                .as_ref()
                .map(|m| invert_mask(m, *t, frame))
                .transpose()
                .map_err(|source| TtaError::Mask {
                    image_id: d.image_id.clone(),
                    source,
                })?;
            let source_id = match t {
                ViewTransform::Identity => d.source_id.clone(),
                _ => format!("{}@{}", d.source_id, t),
            };
            pooled.push(Detection {
                image_id: d.image_id.clone(),
                category_id: d.category_id,
                score: d.score,
                bbox,
                mask,
                source_id,
            });
        }
    }
    DetectionSet::new(original_frames.to_vec(), pooled).map_err(TtaError::Invalid)
}

/// Per-image class probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationOutput {
    pub image_id: ImageId,
    pub probs: Vec<f64>,
}

impl ClassificationOutput {
    /// Checks that `probs` is a probability vector (non-negative, sums to 1 within 1e-6).
    pub fn new(image_id: ImageId, probs: Vec<f64>) -> Result<Self, TtaError> {
        let bad = |reason: String| TtaError::InvalidProbs {
            image_id: image_id.clone(),
            reason,
        };
        if probs.is_empty() {
            return Err(bad("empty".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(bad(format!("entry {p} is not a probability")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(bad(format!("sums to {sum}")));
        }
        Ok(Self { image_id, probs })
    }

    /// Index of the largest probability; ties go to the lower index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in v.iter().enumerate() {
        if *p > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    MajorityVote,
}

/// Combine one image's outputs across views.
///
/// `Mean` averages the probability vectors elementwise and renormalizes.
/// `MajorityVote` counts each view's argmax and returns the vote fractions.
pub fn aggregate_classification(
    outputs: &[ClassificationOutput],
    mode: Aggregation,
) -> Result<ClassificationOutput, TtaError> {
    let first = outputs.first().ok_or(TtaError::Empty)?;
    let arity = first.probs.len();
    for o in outputs {
        if o.image_id != first.image_id {
            return Err(TtaError::MixedImages(first.image_id.clone(), o.image_id.clone()));
        }
        if o.probs.len() != arity {
            return Err(TtaError::ArityMismatch {
                image_id: o.image_id.clone(),
                expected: arity,
                got: o.probs.len(),
            });
        }
    }
    let n = outputs.len() as f64;
    let probs = match mode {
        Aggregation::Mean => {
            let mut acc = vec![0.0; arity];
            for o in outputs {
                for (a, p) in acc.iter_mut().zip(&o.probs) {
                    *a += p;
                }
            }
            let total: f64 = acc.iter().sum();
            acc.iter().map(|a| a / total).collect()
        }
        Aggregation::MajorityVote => {
            let mut votes = vec![0usize; arity];
            for o in outputs {
                votes[o.argmax()] += 1;
            }
            votes.into_iter().map(|v| v as f64 / n).collect()
        }
    };
    Ok(ClassificationOutput {
        image_id: first.image_id.clone(),
        probs,
    })
}
