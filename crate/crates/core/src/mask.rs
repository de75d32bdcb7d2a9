//! Run-length-encoded binary masks.
//!
//! Runs alternate between background and foreground in column-major order
//! (down the first column, then the next) and always begin with a background
//! count, which may be zero. In the canonical form every run after the first is
//! non-zero, so two masks with the same pixels have identical run lists.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MaskError {
    #[error("mask dimensions must be positive, got {width}x{height}")]
    ZeroDimension { width: u32, height: u32 },
    #[error("bitmap has {actual} pixels, expected {width}x{height}")]
    SizeMismatch {
        width: u32,
        height: u32,
        actual: usize,
    },
    #[error("runs sum to {sum}, expected {expected} ({width}x{height})")]
    RunSumMismatch {
        width: u32,
        height: u32,
        sum: u64,
        expected: u64,
    },
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("overlap of two empty masks is undefined")]
    UndefinedOverlap,
}

/// Wire form of a mask: `{"size": [height, width], "runs": [...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawMask {
    pub size: [u32; 2],
    pub runs: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawMask", into = "RawMask")]
pub struct BinaryMask {
    width: u32,
    height: u32,
    runs: Vec<u32>,
}

impl BinaryMask {
    /// Build a mask from a run list, canonicalizing it.
    pub fn from_runs(width: u32, height: u32, runs: &[u64]) -> Result<Self, MaskError> {
        check_dims(width, height)?;
        let expected = width as u64 * height as u64;
        let sum: u64 = runs.iter().sum();
        if sum != expected {
            return Err(MaskError::RunSumMismatch {
                width,
                height,
                sum,
                expected,
            });
        }
        Ok(Self {
            width,
            height,
            runs: canonicalize(runs.iter().map(|&r| r as u32)),
        })
    }

    /// A mask with no foreground pixels.
    pub fn empty(width: u32, height: u32) -> Result<Self, MaskError> {
        Self::from_runs(width, height, &[width as u64 * height as u64])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> u64 {
        self.runs.iter().skip(1).step_by(2).map(|&r| r as u64).sum()
    }

    /// Pixels in column-major order.
    pub fn to_column_major(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.width as usize * self.height as usize);
        let mut value = false;
        for &r in &self.runs {
            out.extend(std::iter::repeat_n(value, r as usize));
            value = !value;
        }
        out
    }

    /// Build from pixels in column-major order.
    pub fn from_column_major(width: u32, height: u32, pixels: &[bool]) -> Result<Self, MaskError> {
        check_dims(width, height)?;
        if pixels.len() != width as usize * height as usize {
            return Err(MaskError::SizeMismatch {
                width,
                height,
                actual: pixels.len(),
            });
        }
        let mut runs = Vec::new();
        let mut current = false;
        let mut count = 0u32;
        for &p in pixels {
            if p != current {
                runs.push(count);
                current = p;
                count = 0;
            }
            count += 1;
        }
        runs.push(count);
        Ok(Self {
            width,
            height,
            runs,
        })
    }

    /// Value at column `x`, row `y`.
    pub fn get(&self, x: u32, y: u32) -> bool {
        let idx = x as u64 * self.height as u64 + y as u64;
        let mut acc = 0u64;
        let mut value = false;
        for &r in &self.runs {
            acc += r as u64;
            if idx < acc {
                return value;
            }
            value = !value;
        }
        false
    }
}

impl TryFrom<RawMask> for BinaryMask {
    type Error = MaskError;

    fn try_from(raw: RawMask) -> Result<Self, Self::Error> {
        let [height, width] = raw.size;
        BinaryMask::from_runs(width, height, &raw.runs)
    }
}

impl From<BinaryMask> for RawMask {
    fn from(m: BinaryMask) -> Self {
        RawMask {
            size: [m.height, m.width],
            runs: m.runs.into_iter().map(u64::from).collect(),
        }
    }
}

fn check_dims(width: u32, height: u32) -> Result<(), MaskError> {
    if width == 0 || height == 0 {
        return Err(MaskError::ZeroDimension { width, height });
    }
    Ok(())
}

fn canonicalize(runs: impl IntoIterator<Item = u32>) -> Vec<u32> {
    let mut out: Vec<u32> = vec![0];
    // parity of the run currently at the end of `out`: false = background
    let mut last_value = false;
    let mut value = false;
    for r in runs {
        if r > 0 {
            if value == last_value {
                *out.last_mut().expect("nonempty") += r;
            } else {
                out.push(r);
                last_value = value;
            }
        }
        value = !value;
    }
    out
}

/// Encode a row-major bitmap (`bitmap[y * width + x]`).
pub fn rle_encode(bitmap: &[bool], width: u32, height: u32) -> Result<BinaryMask, MaskError> {
    check_dims(width, height)?;
    if bitmap.len() != width as usize * height as usize {
        return Err(MaskError::SizeMismatch {
            width,
            height,
            actual: bitmap.len(),
        });
    }
    let (w, h) = (width as usize, height as usize);
    let column_major: Vec<bool> = (0..w)
        .flat_map(|x| (0..h).map(move |y| bitmap[y * w + x]))
        .collect();
    BinaryMask::from_column_major(width, height, &column_major)
}

/// Decode to a row-major bitmap.
pub fn rle_decode(mask: &BinaryMask) -> Vec<bool> {
    let (w, h) = (mask.width as usize, mask.height as usize);
    let column_major = mask.to_column_major();
    let mut out = vec![false; w * h];
    for x in 0..w {
        for y in 0..h {
            out[y * w + x] = column_major[x * h + y];
        }
    }
    out
}

/// Walks two run lists in lockstep and counts `(intersection, union)` pixels.
fn overlap_counts(a: &BinaryMask, b: &BinaryMask) -> (u64, u64) {
    let mut ia = a.runs.iter().map(|&r| r as u64);
    let mut ib = b.runs.iter().map(|&r| r as u64);
    let (mut ra, mut va) = (ia.next().unwrap_or(0), false);
    let (mut rb, mut vb) = (ib.next().unwrap_or(0), false);
    let (mut inter, mut union) = (0u64, 0u64);
    loop {
        while ra == 0 {
            match ia.next() {
                Some(r) => {
                    ra = r;
                    va = !va;
                }
                None => return (inter, union),
            }
        }
        while rb == 0 {
            match ib.next() {
                Some(r) => {
                    rb = r;
                    vb = !vb;
                }
                None => return (inter, union),
            }
        }
        let step = ra.min(rb);
        if va && vb {
            inter += step;
        }
        if va || vb {
            union += step;
        }
        ra -= step;
        rb -= step;
    }
}

/// Pixel IoU of two masks of equal size.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MaskError> {
    if a.width != b.width || a.height != b.height {
        return Err(MaskError::DimensionMismatch(
            a.width, a.height, b.width, b.height,
        ));
    }
    let (inter, union) = overlap_counts(a, b);
    if union == 0 {
        return Err(MaskError::UndefinedOverlap);
    }
    Ok(inter as f64 / union as f64)
}
