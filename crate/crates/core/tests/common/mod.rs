//! Brute-force reference implementations and random generators shared by the
//! integration tests. Nothing here calls into the engine code it checks.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use stagekit::{Annotation, BoundingBox, Detection, DetectionSet, GroundTruth, ImageId, ImageMeta};

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

/// Intersection over union from first principles.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    inter / (area(a) + area(b) - inter)
}

/// A detection as plain data: image, category, score, corners.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Det {
    pub image: i64,
    pub category: i64,
    pub score: f64,
    pub bbox: [f64; 4],
}

/// A ground-truth annotation as plain data: image, category, corners.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gt {
    pub image: i64,
    pub category: i64,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub frame: (u32, u32),
    pub images: Vec<i64>,
    pub dets: Vec<Det>,
    pub gts: Vec<Gt>,
}

impl Dataset {
    pub fn metas(&self) -> Vec<ImageMeta> {
        self.images
            .iter()
            .map(|&i| ImageMeta::new(i, self.frame.0, self.frame.1))
            .collect()
    }

    pub fn prediction_set(&self) -> DetectionSet {
        let dets = self
            .dets
            .iter()
            .map(|d| Detection {
                image_id: ImageId::from(d.image),
                category_id: d.category,
                score: d.score,
                bbox: to_box(d.bbox),
                mask: None,
                source_id: "model".into(),
            })
            .collect();
        DetectionSet::new(self.metas(), dets).expect("generated predictions are valid")
    }

    pub fn ground_truth(&self) -> GroundTruth {
        let anns = self
            .gts
            .iter()
            .enumerate()
            .map(|(i, g)| Annotation {
                id: i as u64,
                image_id: ImageId::from(g.image),
                category_id: g.category,
                bbox: to_box(g.bbox),
                mask: None,
            })
            .collect();
        GroundTruth::new(self.metas(), anns).expect("generated ground truth is valid")
    }
}

pub fn to_box(c: [f64; 4]) -> BoundingBox {
    BoundingBox::new(c[0], c[1], c[2], c[3]).expect("generated box is valid")
}

/// Box on a coarse grid inside a `w x h` frame so that overlaps and exact IoU
/// ties are common.
pub fn grid_box(rng: &mut ChaCha8Rng, w: u32, h: u32, step: f64) -> [f64; 4] {
    let nx = (w as f64 / step) as u32;
    let ny = (h as f64 / step) as u32;
    let x1 = rng.gen_range(0..nx);
    let y1 = rng.gen_range(0..ny);
    let x2 = rng.gen_range(x1 + 1..=nx);
    let y2 = rng.gen_range(y1 + 1..=ny);
    [
        x1 as f64 * step,
        y1 as f64 * step,
        x2 as f64 * step,
        y2 as f64 * step,
    ]
}

/// Random small dataset with at most `max_dets` detections and between 1 and
/// `max_gt` annotations in total. Boxes cluster around a few anchors per image
/// so that matches at every threshold occur; scores come from a small set so
/// ties occur too.
pub fn mini_dataset(
    rng: &mut ChaCha8Rng,
    max_images: usize,
    max_dets: usize,
    max_gt: usize,
    categories: i64,
) -> Dataset {
    let frame = (64, 64);
    let n_images = rng.gen_range(1..=max_images);
    let images: Vec<i64> = (1..=n_images as i64).collect();
    let anchors: Vec<Vec<[f64; 4]>> = images
        .iter()
        .map(|_| (0..3).map(|_| grid_box(rng, 64, 64, 4.0)).collect())
        .collect();
    let pick = |rng: &mut ChaCha8Rng| {
        let i = rng.gen_range(0..n_images);
        let a = anchors[i][rng.gen_range(0..3)];
        (images[i], a)
    };
    let gts = (0..rng.gen_range(1..=max_gt))
        .map(|_| {
            let (image, a) = pick(rng);
            Gt {
                image,
                category: rng.gen_range(1..=categories),
                bbox: jitter(rng, a),
            }
        })
        .collect();
    let dets = (0..rng.gen_range(0..=max_dets))
        .map(|_| {
            let (image, a) = pick(rng);
            let bbox = if rng.gen_bool(0.2) {
                grid_box(rng, 64, 64, 4.0)
            } else {
                jitter(rng, a)
            };
            Det {
                image,
                category: rng.gen_range(1..=categories),
                score: rng.gen_range(1..=20) as f64 / 20.0,
                bbox,
            }
        })
        .collect();
    Dataset { frame, images, dets, gts }
}

fn jitter(rng: &mut ChaCha8Rng, a: [f64; 4]) -> [f64; 4] {
    let mut out = a;
    for v in &mut out {
        *v = (*v + rng.gen_range(-2..=2) as f64).clamp(0.0, 64.0);
    }
    if out[2] <= out[0] {
        out[0] = a[0];
        out[2] = a[2];
    }
    if out[3] <= out[1] {
        out[1] = a[1];
        out[3] = a[3];
    }
    out
}

/// Evaluation of one category at one IoU threshold by direct enumeration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleScore {
    pub ap: f64,
    pub ar: f64,
}

/// Matches every detection of `category` (or of every category when `None`)
/// by brute force, builds the full precision/recall curve and reads off the
/// 101-point interpolated AP and the recall.
pub fn oracle_score(ds: &Dataset, category: Option<i64>, thr: f64) -> OracleScore {
    let in_cat = |c: i64| category.is_none_or(|k| k == c);
    let gts: Vec<&Gt> = ds.gts.iter().filter(|g| in_cat(g.category)).collect();
    let npig = gts.len();
    assert!(npig > 0, "oracle needs ground truth");

    // within an image, detections go by score descending then corners ascending
    let mut hits: Vec<(f64, i64, usize, bool)> = Vec::new();
    for &img in &ds.images {
        let mut dets: Vec<&Det> = ds.dets.iter().filter(|d| d.image == img && in_cat(d.category)).collect();
        dets.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then_with(|| a.bbox.partial_cmp(&b.bbox).unwrap())
        });
        let cand: Vec<&Gt> = gts.iter().filter(|g| g.image == img).copied().collect();
        let mut taken = vec![false; cand.len()];
        for (rank, d) in dets.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in cand.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let v = iou(d.bbox, g.bbox);
                if v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
            }
            hits.push((d.score, img, rank, best.is_some()));
        }
    }
    hits.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut curve = Vec::new();
    let mut tp = 0usize;
    for (k, h) in hits.iter().enumerate() {
        if h.3 {
            tp += 1;
        }
        curve.push((tp as f64 / npig as f64, tp as f64 / (k + 1) as f64));
    }
    let mut ap = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = curve
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        ap += p;
    }
    OracleScore {
        ap: ap / 101.0,
        ar: tp as f64 / npig as f64,
    }
}

/// Thresholds 0.50, 0.55, ..., 0.95 computed independently of the engine.
pub fn thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Distance in units in the last place between two finite `f32` values.
pub fn ulp_distance(a: f32, b: f32) -> u64 {
    fn key(x: f32) -> i64 {
        let bits = x.to_bits() as i32 as i64;
        if bits < 0 {
            i32::MIN as i64 - bits
        } else {
            bits
        }
    }
    (key(a) - key(b)).unsigned_abs()
}
