//! Plain-value geometry: boxes in normalized center-size form, bit masks,
//! run-length codes, and greedy NMS. Everything here is detached from the
//! autodiff graph; the differentiable box losses live in `losses`.

use serde::{Deserialize, Serialize};

/// An axis-aligned box as (center, size) in normalized [0, 1] image
/// coordinates. Zero-area boxes are legal everywhere; overlap with them is
/// defined as zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox { cx, cy, w, h }
    }

    /// Corner form (x0, y0, x1, y1).
    pub fn xyxy(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn from_xyxy(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox {
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// Normalized box covering pixel rows `y0..y1` and columns `x0..x1` of an
    /// `h` x `w` canvas.
    pub fn from_pixel_bounds(y0: usize, x0: usize, y1: usize, x1: usize, h: usize, w: usize) -> BBox {
        BBox::from_xyxy(
            x0 as f64 / w as f64,
            y0 as f64 / h as f64,
            x1 as f64 / w as f64,
            y1 as f64 / h as f64,
        )
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.xyxy();
        let (bx0, by0, bx1, by1) = other.xyxy();
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        iw * ih
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Generalized IoU: IoU minus the fraction of the enclosing hull not
    /// covered by the union. Always in [-1, 1].
    pub fn giou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        let iou = if union <= 0.0 { 0.0 } else { inter / union };
        let (ax0, ay0, ax1, ay1) = self.xyxy();
        let (bx0, by0, bx1, by1) = other.xyxy();
        let hull = (ax1.max(bx1) - ax0.min(bx0)).max(0.0) * (ay1.max(by1) - ay0.min(by0)).max(0.0);
        if hull <= 0.0 {
            iou
        } else {
            iou - (hull - union) / hull
        }
    }

    /// L1 distance in (cx, cy, w, h) coordinates.
    pub fn l1(&self, other: &BBox) -> f64 {
        (self.cx - other.cx).abs()
            + (self.cy - other.cy).abs()
            + (self.w - other.w).abs()
            + (self.h - other.h).abs()
    }

    /// Clips the corner form to the unit square.
    pub fn clip_unit(&self) -> BBox {
        let (x0, y0, x1, y1) = self.xyxy();
        BBox::from_xyxy(
            x0.clamp(0.0, 1.0),
            y0.clamp(0.0, 1.0),
            x1.clamp(0.0, 1.0),
            y1.clamp(0.0, 1.0),
        )
    }
}

// ---------------------------------------------------------------------------
// bit masks

/// A binary mask stored as packed 64-bit words, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BitMask {
    h: usize,
    w: usize,
    words: Vec<u64>,
}

impl BitMask {
    pub fn zeros(h: usize, w: usize) -> BitMask {
        BitMask {
            h,
            w,
            words: vec![0; (h * w).div_ceil(64)],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> BitMask {
        let mut m = BitMask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                if f(y, x) {
                    m.set(y, x, true);
                }
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        let bit = y * self.w + x;
        self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        let bit = y * self.w + x;
        if value {
            self.words[bit / 64] |= 1 << (bit % 64);
        } else {
            self.words[bit / 64] &= !(1 << (bit % 64));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn intersection_count(&self, other: &BitMask) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    /// IoU by popcount; two empty masks overlap by definition zero.
    pub fn iou(&self, other: &BitMask) -> f64 {
        debug_assert_eq!((self.h, self.w), (other.h, other.w));
        let inter = self.intersection_count(other);
        let union = self.count_ones() + other.count_ones() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Tight pixel bounds (y0, x0, y1, x1), end-exclusive; None when empty.
    pub fn tight_bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) {
                    y0 = y0.min(y);
                    x0 = x0.min(x);
                    y1 = y1.max(y + 1);
                    x1 = x1.max(x + 1);
                }
            }
        }
        (y0 != usize::MAX).then_some((y0, x0, y1, x1))
    }
}

// ---------------------------------------------------------------------------
// run-length codes

/// COCO-style run-length code: column-major scan, alternating run lengths
/// beginning with a (possibly zero) run of zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rle {
    /// [height, width]
    pub size: [usize; 2],
    pub counts: Vec<usize>,
}

impl Rle {
    pub fn encode(mask: &BitMask) -> Rle {
        let (h, w) = (mask.height(), mask.width());
        let mut counts = Vec::new();
        let mut current = false; // runs start with zeros
        let mut run = 0usize;
        for x in 0..w {
            for y in 0..h {
                let v = mask.get(y, x);
                if v == current {
                    run += 1;
                } else {
                    counts.push(run);
                    current = v;
                    run = 1;
                }
            }
        }
        counts.push(run);
        if h * w == 0 {
            counts.clear();
        }
        Rle { size: [h, w], counts }
    }

    pub fn decode(&self) -> Result<BitMask, RleError> {
        let [h, w] = self.size;
        let total: usize = self.counts.iter().sum();
        if total != h * w {
            return Err(RleError::LengthMismatch {
                expected: h * w,
                got: total,
            });
        }
        let mut mask = BitMask::zeros(h, w);
        let mut pos = 0usize;
        for (i, &run) in self.counts.iter().enumerate() {
            if i % 2 == 1 {
                for p in pos..pos + run {
                    mask.set(p % h, p / h, true); // column-major position
                }
            }
            pos += run;
        }
        Ok(mask)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RleError {
    #[error("run lengths sum to {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

// ---------------------------------------------------------------------------
// non-maximum suppression

/// Greedy NMS: visit by descending score (ties by lower index) and drop any
/// candidate whose IoU with an already kept box exceeds `iou_threshold`.
/// Returns kept indices in visit order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let order = crate::util::argsort_desc(scores);
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}
