//! Post-processing engine for a two-stage bleeding detection pipeline.
//!
//! A classifier first decides per frame whether bleeding is present; a
//! grounding stage then localizes regions (boxes and masks) on the frames the
//! classifier let through. The neural networks themselves live elsewhere. This
//! crate takes their outputs and does everything downstream of them:
//!
//! - [`geometry`] and [`mask`]: boxes, IoU and run-length encoded masks.
//! - [`nms`]: greedy non-maximum suppression.
//! - [`tta`]: test-time augmentation transforms, their inverses, and
//!   aggregation of classification views.
//! - [`ensemble`]: fusing detections from several models.
//! - [`swa`]: averaging weight checkpoints in a flat tensor archive format.
//! - [`metrics`]: COCO-style AP/AR and classification scores.
//! - [`pipeline`]: the end-to-end gating and grounding run.
//!
//! ```
//! use stagekit::geometry::BoundingBox;
//! use stagekit::nms::nms;
//! use stagekit::{Detection, ImageId};
//!
//! let det = |score, x1| Detection {
//!     image_id: ImageId::from(1),
//!     category_id: 1,
//!     score,
//!     bbox: BoundingBox::new(x1, 0.0, x1 + 10.0, 10.0).unwrap(),
//!     mask: None,
//!     source_id: "model".into(),
//! };
//! let kept = nms(&[det(0.9, 0.0), det(0.8, 1.0), det(0.7, 50.0)], 0.5);
//! assert_eq!(kept.len(), 2);
//! ```

pub mod ensemble;
pub mod geometry;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nms;
pub mod pipeline;
pub mod swa;
pub mod tta;
pub mod validate;

pub use geometry::BoundingBox;
pub use mask::BinaryMask;
pub use model::{Annotation, CategoryId, Detection, DetectionSet, GroundTruth, ImageId, ImageMeta};
pub use validate::{ValidationReport, Violation};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/tta.md")]
    mod tta {}
    #[doc = include_str!("../../../book/src/ensemble.md")]
    mod ensemble {}
    #[doc = include_str!("../../../book/src/swa.md")]
    mod swa {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
