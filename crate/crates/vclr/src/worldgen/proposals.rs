//! Class-agnostic object proposals from a noisy oracle.
//!
//! A real open-world pipeline gets proposals from a pretrained unsupervised
//! detector; here the generator itself plays that role, corrupted just enough
//! to be interesting: jittered boxes, eroded/dilated masks, dropped objects,
//! and occasional false positives. Known and unknown objects are treated
//! identically — proposals carry no class information.

use super::scene::{SceneSpec, CANVAS, SIZE_RANGE};
use crate::geom::{nms, BBox, BitMask};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Proposals overlapping more than this (box IoU) are suppressed.
pub const NMS_IOU: f64 = 0.7;
/// After suppression, keep the top-k by confidence.
pub const MAX_PROPOSALS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    /// In (0, 1); true objects draw from U(0.5, 1), false positives from
    /// U(0.1, 0.6).
    pub confidence: f64,
    pub bbox: BBox,
    pub mask: BitMask,
}

/// Oracle corruption knobs. `Default` is the calibrated operating point;
/// [`ProposalNoise::none`] turns the oracle into a perfect proposer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalNoise {
    /// Box jitter scale as a fraction of box size.
    pub box_sigma: f64,
    /// Probability of eroding or dilating the mask boundary by one pixel.
    pub morph_prob: f64,
    /// Probability of dropping a true object entirely.
    pub drop_prob: f64,
    /// Probability of adding one false-positive blob.
    pub fp_prob: f64,
}

impl Default for ProposalNoise {
    fn default() -> Self {
        ProposalNoise {
            box_sigma: 0.07,
            morph_prob: 0.5,
            drop_prob: 0.15,
            fp_prob: 0.5,
        }
    }
}

impl ProposalNoise {
    pub fn none() -> Self {
        ProposalNoise {
            box_sigma: 0.0,
            morph_prob: 0.0,
            drop_prob: 0.0,
            fp_prob: 0.0,
        }
    }
}

/// Emit proposals for every visible object (minus drops, plus false
/// positives), then box-NMS at [`NMS_IOU`] and keep the [`MAX_PROPOSALS`]
/// most confident. With zero noise and <= 10 objects this returns exactly
/// the ground-truth instances.
pub fn oracle_proposals(
    scene: &SceneSpec,
    rng: &mut impl Rng,
    noise: &ProposalNoise,
) -> Vec<Proposal> {
    let mut raw: Vec<Proposal> = Vec::new();
    for obj in &scene.objects {
        if noise.drop_prob > 0.0 && rng.gen_bool(noise.drop_prob) {
            continue;
        }
        let confidence = rng.gen_range(0.5..1.0);
        let bbox = jitter_box(&obj.bbox, noise.box_sigma, rng);
        let mask = if noise.morph_prob > 0.0 && rng.gen_bool(noise.morph_prob) {
            if rng.gen_bool(0.5) {
                dilate(&obj.mask)
            } else {
                erode(&obj.mask)
            }
        } else {
            obj.mask.clone()
        };
        if mask.count_ones() == 0 {
            continue; // erosion can wipe out a sliver object
        }
        raw.push(Proposal {
            confidence,
            bbox,
            mask,
        });
    }
    if noise.fp_prob > 0.0 && rng.gen_bool(noise.fp_prob) {
        if let Some(fp) = false_positive(rng) {
            raw.push(fp);
        }
    }

    let boxes: Vec<BBox> = raw.iter().map(|p| p.bbox).collect();
    let scores: Vec<f64> = raw.iter().map(|p| p.confidence).collect();
    let mut kept = nms(&boxes, &scores, NMS_IOU);
    kept.truncate(MAX_PROPOSALS);
    // nms visits by descending confidence, so this is already top-k order
    kept.into_iter().map(|i| raw[i].clone()).collect()
}

fn jitter_box(b: &BBox, sigma: f64, rng: &mut impl Rng) -> BBox {
    if sigma == 0.0 {
        return *b;
    }
    let n: [f64; 4] = [
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    ];
    let min_side = 1.0 / CANVAS as f64;
    BBox {
        cx: b.cx + sigma * b.w * n[0],
        cy: b.cy + sigma * b.h * n[1],
        w: (b.w * (1.0 + sigma * n[2])).max(min_side),
        h: (b.h * (1.0 + sigma * n[3])).max(min_side),
    }
    .clip_unit()
}

/// A spurious detection: an axis-aligned elliptical blob at a random pose.
fn false_positive(rng: &mut impl Rng) -> Option<Proposal> {
    let size = rng.gen_range(SIZE_RANGE.0..=SIZE_RANGE.1);
    let half = size / 2.0;
    let cx = rng.gen_range(half..=CANVAS as f64 - half);
    let cy = rng.gen_range(half..=CANVAS as f64 - half);
    let a = half * rng.gen_range(0.5..=1.0);
    let b = half * rng.gen_range(0.5..=1.0);
    let confidence = rng.gen_range(0.1..0.6);
    let mask = BitMask::from_fn(CANVAS, CANVAS, |y, x| {
        let dx = (x as f64 + 0.5 - cx) / a;
        let dy = (y as f64 + 0.5 - cy) / b;
        dx * dx + dy * dy <= 1.0
    });
    let (y0, x0, y1, x1) = mask.tight_bounds()?;
    Some(Proposal {
        confidence,
        bbox: BBox::from_pixel_bounds(y0, x0, y1, x1, CANVAS, CANVAS),
        mask,
    })
}

fn erode(mask: &BitMask) -> BitMask {
    let (h, w) = (mask.height(), mask.width());
    BitMask::from_fn(h, w, |y, x| {
        mask.get(y, x)
            && y > 0
            && mask.get(y - 1, x)
            && y + 1 < h
            && mask.get(y + 1, x)
            && x > 0
            && mask.get(y, x - 1)
            && x + 1 < w
            && mask.get(y, x + 1)
    })
}

fn dilate(mask: &BitMask) -> BitMask {
    let (h, w) = (mask.height(), mask.width());
    BitMask::from_fn(h, w, |y, x| {
        mask.get(y, x)
            || (y > 0 && mask.get(y - 1, x))
            || (y + 1 < h && mask.get(y + 1, x))
            || (x > 0 && mask.get(y, x - 1))
            || (x + 1 < w && mask.get(y, x + 1))
    })
}
