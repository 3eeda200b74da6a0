//! Binary mask representation, run-length codec, and box/mask geometry.
//!
//! Masks are stored row-major; the run-length codec scans column-major
//! (top-to-bottom, then left-to-right) and always starts with a zero-run
//! count, matching the COCO uncompressed-RLE convention so external
//! COCO-format annotations can be ingested bit-exactly. Boxes use half-open
//! pixel coordinates `[x_min, x_max) x [y_min, y_max)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("run lengths sum to {sum} but mask is {h}x{w}={expected}")]
    SizeMismatch { sum: usize, h: usize, w: usize, expected: usize },
    #[error("mask has no set pixels")]
    EmptyMask,
    #[error("dimension mismatch: {ah}x{aw} vs {bh}x{bw}")]
    DimMismatch { ah: usize, aw: usize, bh: usize, bw: usize },
    #[error("invalid mask shape {h}x{w} for buffer of length {len}")]
    BadShape { h: usize, w: usize, len: usize },
    #[error("zero-length run after the leading count")]
    EmptyRun,
    #[error("value {value} outside [0, 1]")]
    ValueOutOfRange { value: f64 },
    #[error("degenerate box [{x0}, {y0}, {x1}, {y1}]")]
    DegenerateBox { x0: f64, y0: f64, x1: f64, y1: f64 },
}

/// Row-major binary raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self, MaskError> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(MaskError::BadShape { h: height, w: width, len: bits.len() });
        }
        Ok(Self { height, width, bits })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    /// Mask from a half-open pixel rectangle, clipped to the image.
    pub fn from_rect(height: usize, width: usize, rect: &BBox) -> Self {
        let mut m = Self::zeros(height, width);
        let y0 = rect.y_min.max(0.0) as usize;
        let y1 = (rect.y_max.min(height as f64)).max(0.0) as usize;
        let x0 = rect.x_min.max(0.0) as usize;
        let x1 = (rect.x_max.min(width as f64)).max(0.0) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(y, x, true);
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of set pixels.
    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|&b| !b).collect(),
        }
    }

    pub fn intersects(&self, other: &Self) -> bool {
        self.bits.iter().zip(&other.bits).any(|(&a, &b)| a && b)
    }
}

/// Soft per-pixel mask with values in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftMask {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl SoftMask {
    pub fn new(h: usize, w: usize, values: Vec<f64>) -> Result<Self, MaskError> {
        if h == 0 || w == 0 || values.len() != h * w {
            return Err(MaskError::BadShape { h, w, len: values.len() });
        }
        if let Some(&v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(MaskError::ValueOutOfRange { value: v });
        }
        Ok(Self { h, w, values })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.w + col]
    }

    /// Binarize at a strict threshold.
    pub fn threshold(&self, t: f64) -> BinaryMask {
        BinaryMask {
            height: self.h,
            width: self.w,
            bits: self.values.iter().map(|&v| v > t).collect(),
        }
    }

    /// Nearest-neighbour resize; used to lift grid-resolution predictions to
    /// image resolution.
    pub fn resize_nearest(&self, h: usize, w: usize) -> SoftMask {
        let mut values = Vec::with_capacity(h * w);
        for y in 0..h {
            let sy = y * self.h / h;
            for x in 0..w {
                let sx = x * self.w / w;
                values.push(self.values[sy * self.w + sx]);
            }
        }
        SoftMask { h, w, values }
    }
}

/// Uncompressed run-length encoding, column-major scan, leading zero-run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub h: usize,
    pub w: usize,
    pub counts: Vec<usize>,
}

impl Rle {
    /// Checks the size law and the alternating-run shape (only the leading
    /// zero-run may have length zero).
    pub fn validate(&self) -> Result<(), MaskError> {
        let sum: usize = self.counts.iter().sum();
        if sum != self.h * self.w {
            return Err(MaskError::SizeMismatch {
                sum,
                h: self.h,
                w: self.w,
                expected: self.h * self.w,
            });
        }
        if self.counts.iter().skip(1).any(|&c| c == 0) {
            return Err(MaskError::EmptyRun);
        }
        Ok(())
    }
}

/// Axis-aligned box, half-open pixel convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, MaskError> {
        let b = Self { x_min, y_min, x_max, y_max };
        if !(x_min < x_max && y_min < y_max) || !b.is_finite() {
            return Err(MaskError::DegenerateBox { x0: x_min, y0: y_min, x1: x_max, y1: y_max });
        }
        Ok(b)
    }

    fn is_finite(&self) -> bool {
        self.x_min.is_finite()
            && self.y_min.is_finite()
            && self.x_max.is_finite()
            && self.y_max.is_finite()
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }

    /// Normalized center form (cx, cy, w, h) given the image size.
    pub fn to_center_form(&self, image_h: usize, image_w: usize) -> [f64; 4] {
        let iw = image_w as f64;
        let ih = image_h as f64;
        [
            (self.x_min + self.x_max) / 2.0 / iw,
            (self.y_min + self.y_max) / 2.0 / ih,
            (self.x_max - self.x_min) / iw,
            (self.y_max - self.y_min) / ih,
        ]
    }
}

/// Corner form (x0, y0, x1, y1) from normalized centers; the inverse of
/// [`BBox::to_center_form`] up to the image scale.
pub fn center_to_corners(b: &[f64; 4]) -> [f64; 4] {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

/// Run-length encode a mask in column-major scan order.
pub fn rle_encode(mask: &BinaryMask) -> Rle {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0usize;
    for x in 0..mask.width() {
        for y in 0..mask.height() {
            let bit = mask.get(y, x);
            if bit == current {
                run += 1;
            } else {
                counts.push(run);
                current = bit;
                run = 1;
            }
        }
    }
    counts.push(run);
    Rle { h: mask.height(), w: mask.width(), counts }
}

/// Exact inverse of [`rle_encode`].
pub fn rle_decode(rle: &Rle) -> Result<BinaryMask, MaskError> {
    rle.validate()?;
    let mut mask = BinaryMask::zeros(rle.h, rle.w);
    let mut flat = 0usize;
    let mut value = false;
    for &count in &rle.counts {
        if value {
            for k in flat..flat + count {
                // column-major flat index -> (row, col)
                let col = k / rle.h;
                let row = k % rle.h;
                mask.set(row, col, true);
            }
        }
        flat += count;
        value = !value;
    }
    Ok(mask)
}

/// Tight axis-aligned box around the set pixels.
pub fn mask_to_bbox(mask: &BinaryMask) -> Result<BBox, MaskError> {
    let mut x_min = usize::MAX;
    let mut y_min = usize::MAX;
    let mut x_max = 0usize;
    let mut y_max = 0usize;
    let mut any = false;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                any = true;
                x_min = x_min.min(x);
                y_min = y_min.min(y);
                x_max = x_max.max(x);
                y_max = y_max.max(y);
            }
        }
    }
    if !any {
        return Err(MaskError::EmptyMask);
    }
    BBox::new(x_min as f64, y_min as f64, x_max as f64 + 1.0, y_max as f64 + 1.0)
}

/// Intersection over union of two equally sized masks. Two empty masks have
/// IoU 0 by definition.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MaskError> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(MaskError::DimMismatch {
            ah: a.height(),
            aw: a.width(),
            bh: b.height(),
            bw: b.width(),
        });
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Box intersection over union.
pub fn bbox_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Generalized IoU: IoU minus the normalized slack of the smallest enclosing
/// box; ranges over [-1, 1].
pub fn bbox_giou(a: &BBox, b: &BBox) -> f64 {
    let iou = bbox_iou(a, b);
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let union = a.area() + b.area() - iw * ih;
    let cw = a.x_max.max(b.x_max) - a.x_min.min(b.x_min);
    let ch = a.y_max.max(b.y_max) - a.y_min.min(b.y_min);
    let enclose = cw * ch;
    if enclose <= 0.0 {
        return iou;
    }
    iou - (enclose - union) / enclose
}
