//! The three appearance views of a scene and the crop-paste augmentation.
//!
//! All views share one geometry: masks and boxes live on the `SceneSpec` and
//! are never re-derived per view. The structure view deliberately destroys
//! color and texture (the 2D stand-in for a colorized depth map); the
//! stylized view keeps content but scrambles appearance with a channel
//! permutation and a tone curve.

use super::proposals::Proposal;
use super::scene::{SceneObject, SceneSpec, CANVAS};
use crate::geom::{BBox, BitMask};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Elements per view buffer: HWC with three channels.
pub const VIEW_LEN: usize = CANVAS * CANVAS * 3;

/// Background gray of the natural (and hence stylized) view.
pub const BG_NATURAL: f64 = 0.15;
/// Background level of the structure view.
pub const BG_STRUCTURE: f64 = 0.10;

/// Dark-tile multiplier and tile side of the checker texture.
const CHECKER_DIM: f64 = 0.55;
const CHECKER_TILE: usize = 2;

const PERMS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Natural,
    Structure,
    Stylized,
}

impl ViewKind {
    pub const ALL: [ViewKind; 3] = [ViewKind::Natural, ViewKind::Structure, ViewKind::Stylized];
}

impl fmt::Display for ViewKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViewKind::Natural => "natural",
            ViewKind::Structure => "structure",
            ViewKind::Stylized => "stylized",
        };
        f.write_str(s)
    }
}

impl FromStr for ViewKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "natural" => Ok(ViewKind::Natural),
            "structure" => Ok(ViewKind::Structure),
            "stylized" => Ok(ViewKind::Stylized),
            other => Err(format!("unknown view '{other}'")),
        }
    }
}

/// The three rendered views of one scene, each a CANVAS x CANVAS x 3 buffer
/// in [0, 1], row-major HWC. Stored as f32 — the on-disk precision — so a
/// write/read round trip is bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub natural: Vec<f32>,
    pub structure: Vec<f32>,
    pub stylized: Vec<f32>,
}

impl ViewSet {
    pub fn view(&self, kind: ViewKind) -> &[f32] {
        match kind {
            ViewKind::Natural => &self.natural,
            ViewKind::Structure => &self.structure,
            ViewKind::Stylized => &self.stylized,
        }
    }
}

/// Render all three views. The rng drives only the stylization parameters
/// (channel permutation and gamma); geometry is fully determined by `scene`.
pub fn render_views(scene: &SceneSpec, rng: &mut impl Rng) -> ViewSet {
    let natural = compose_natural(&scene.objects);
    let structure = compose_structure(&scene.objects);

    let perm = PERMS[rng.gen_range(0..PERMS.len())];
    let gamma: f64 = rng.gen_range(0.6..=1.6);
    let mut stylized = vec![0.0f64; VIEW_LEN];
    for p in 0..CANVAS * CANVAS {
        for c in 0..3 {
            stylized[p * 3 + c] = natural[p * 3 + perm[c]].powf(gamma);
        }
    }

    ViewSet {
        natural: natural.iter().map(|&v| v as f32).collect(),
        structure: structure.iter().map(|&v| v as f32).collect(),
        stylized: stylized.iter().map(|&v| v as f32).collect(),
    }
}

fn compose_natural(objects: &[SceneObject]) -> Vec<f64> {
    let mut img = vec![BG_NATURAL; VIEW_LEN];
    for obj in objects {
        let rgb = obj.spec.color.rgb();
        for y in 0..CANVAS {
            for x in 0..CANVAS {
                if !obj.mask.get(y, x) {
                    continue;
                }
                let shade = match obj.spec.material {
                    super::scene::Material::Flat => 1.0,
                    super::scene::Material::Checker => {
                        if (y / CHECKER_TILE + x / CHECKER_TILE) % 2 == 0 {
                            1.0
                        } else {
                            CHECKER_DIM
                        }
                    }
                };
                let p = (y * CANVAS + x) * 3;
                for c in 0..3 {
                    img[p + c] = rgb[c] * shade;
                }
            }
        }
    }
    img
}

/// Gray level per object, by stacking rank: nearer (higher z) is brighter.
/// Depends only on geometry and z order, never on color or material.
fn compose_structure(objects: &[SceneObject]) -> Vec<f64> {
    let mut ranks: Vec<usize> = (0..objects.len()).collect();
    ranks.sort_by_key(|&i| objects[i].spec.z);
    let n = objects.len();
    let mut img = vec![BG_STRUCTURE; VIEW_LEN];
    for (rank, &i) in ranks.iter().enumerate() {
        let level = 0.3 + 0.65 * (rank + 1) as f64 / n as f64;
        let obj = &objects[i];
        for y in 0..CANVAS {
            for x in 0..CANVAS {
                if obj.mask.get(y, x) {
                    let p = (y * CANVAS + x) * 3;
                    img[p] = level;
                    img[p + 1] = level;
                    img[p + 2] = level;
                }
            }
        }
    }
    img
}

// ---------------------------------------------------------------------------
// crop-paste

/// A sampled crop-paste: copy the `side` x `side` patch at `src` (x, y),
/// nearest-neighbor resize it to `dst_side`, and stamp it at `dst` — the same
/// rectangle in every view, so geometry stays consistent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PasteOp {
    pub src: [usize; 2],
    pub side: usize,
    pub dst: [usize; 2],
    pub dst_side: usize,
}

/// Draw the augmentation for one image: `None` half the time (identity),
/// otherwise a patch of side 16–32 px rescaled by a factor in [0.5, 2.0].
pub fn sample_paste(rng: &mut impl Rng) -> Option<PasteOp> {
    if !rng.gen_bool(0.5) {
        return None;
    }
    let side = rng.gen_range(16..=32usize);
    let sx = rng.gen_range(0..=CANVAS - side);
    let sy = rng.gen_range(0..=CANVAS - side);
    let factor: f64 = rng.gen_range(0.5..=2.0);
    let dst_side = ((side as f64 * factor).round() as usize).clamp(8, CANVAS);
    let dx = rng.gen_range(0..=CANVAS - dst_side);
    let dy = rng.gen_range(0..=CANVAS - dst_side);
    Some(PasteOp {
        src: [sx, sy],
        side,
        dst: [dx, dy],
        dst_side,
    })
}

impl PasteOp {
    fn apply_image(&self, img: &[f32]) -> Vec<f32> {
        let mut out = img.to_vec();
        let [sx, sy] = self.src;
        let [dx, dy] = self.dst;
        for r in 0..self.dst_side {
            let sr = sy + r * self.side / self.dst_side;
            for c in 0..self.dst_side {
                let sc = sx + c * self.side / self.dst_side;
                let from = (sr * CANVAS + sc) * 3;
                let to = ((dy + r) * CANVAS + (dx + c)) * 3;
                out[to..to + 3].copy_from_slice(&img[from..from + 3]);
            }
        }
        out
    }

    /// Clear every mask bit under the destination rectangle.
    fn occlude(&self, mask: &BitMask) -> BitMask {
        let mut out = mask.clone();
        let [dx, dy] = self.dst;
        for y in dy..dy + self.dst_side {
            for x in dx..dx + self.dst_side {
                out.set(y, x, false);
            }
        }
        out
    }

    pub fn apply(
        &self,
        views: &ViewSet,
        scene: &SceneSpec,
        proposals: &[Proposal],
    ) -> (ViewSet, SceneSpec, Vec<Proposal>) {
        let views = ViewSet {
            natural: self.apply_image(&views.natural),
            structure: self.apply_image(&views.structure),
            stylized: self.apply_image(&views.stylized),
        };
        // Pasted pixels occlude: shrink masks, retighten boxes, drop anything
        // left invisible. Proposal boxes are only retightened when their mask
        // actually lost pixels — untouched proposals keep their noisy box.
        let objects = scene
            .objects
            .iter()
            .filter_map(|obj| {
                let mask = self.occlude(&obj.mask);
                mask.tight_bounds().map(|(y0, x0, y1, x1)| SceneObject {
                    spec: obj.spec,
                    bbox: BBox::from_pixel_bounds(y0, x0, y1, x1, CANVAS, CANVAS),
                    mask,
                })
            })
            .collect();
        let proposals = proposals
            .iter()
            .filter_map(|p| {
                let mask = self.occlude(&p.mask);
                mask.tight_bounds().map(|(y0, x0, y1, x1)| Proposal {
                    confidence: p.confidence,
                    bbox: if mask.count_ones() == p.mask.count_ones() {
                        p.bbox
                    } else {
                        BBox::from_pixel_bounds(y0, x0, y1, x1, CANVAS, CANVAS)
                    },
                    mask,
                })
            })
            .collect();
        (views, SceneSpec { objects }, proposals)
    }
}

/// Crop-paste augmentation. With probability 0.5 the identity; otherwise one
/// [`PasteOp`] applied consistently to all three views, with annotations
/// updated for the occlusion it causes.
pub fn crop_paste(views: &ViewSet, scene: &SceneSpec, rng: &mut impl Rng) -> (ViewSet, SceneSpec) {
    let (views, scene, _) = crop_paste_with_proposals(views, scene, &[], rng);
    (views, scene)
}

/// As [`crop_paste`], but also carries the record's proposals through the
/// same occlusion update (pasted pixels hide proposal support too).
pub fn crop_paste_with_proposals(
    views: &ViewSet,
    scene: &SceneSpec,
    proposals: &[Proposal],
    rng: &mut impl Rng,
) -> (ViewSet, SceneSpec, Vec<Proposal>) {
    match sample_paste(rng) {
        None => (views.clone(), scene.clone(), proposals.to_vec()),
        Some(op) => op.apply(views, scene, proposals),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{stream_rng, Stream};
    use crate::worldgen::scene::{
        sample_scene, rasterize, Color, Material, ObjectSpec, Shape,
    };

    fn one_square(color: Color, material: Material) -> SceneSpec {
        let spec = ObjectSpec {
            shape: Shape::Square,
            color,
            material,
            center: [16.0, 16.0],
            size: 8.0,
            z: 0,
        };
        SceneSpec {
            objects: rasterize(&[spec]),
        }
    }

    fn mean_channel(img: &[f32], c: usize) -> f64 {
        img.chunks_exact(3).map(|p| p[c] as f64).sum::<f64>() / (CANVAS * CANVAS) as f64
    }

    #[test]
    fn natural_pixels_hit_fill_color_and_background() {
        let scene = one_square(Color::Blue, Material::Flat);
        let views = render_views(&scene, &mut stream_rng(0, Stream::Stylize, 0));
        let rgb = Color::Blue.rgb();
        let p = (16 * CANVAS + 16) * 3;
        for c in 0..3 {
            assert!((views.natural[p + c] as f64 - rgb[c]).abs() < 1e-6);
        }
        let bg = (60 * CANVAS + 60) * 3;
        for c in 0..3 {
            assert!((views.natural[bg + c] as f64 - BG_NATURAL).abs() < 1e-6);
        }
    }

    #[test]
    fn checker_texture_modulates_fill() {
        let scene = one_square(Color::Yellow, Material::Checker);
        let views = render_views(&scene, &mut stream_rng(0, Stream::Stylize, 0));
        let vals: Vec<f64> = (12..20)
            .map(|x| views.natural[(16 * CANVAS + x) * 3] as f64)
            .collect();
        let bright = Color::Yellow.rgb()[0];
        assert!(vals.iter().any(|&v| (v - bright).abs() < 1e-6));
        assert!(vals.iter().any(|&v| (v - bright * CHECKER_DIM).abs() < 1e-6));
    }

    /// The structure view is a pure function of geometry: recoloring every
    /// object changes nothing.
    #[test]
    fn structure_ignores_color_and_material() {
        let scene = sample_scene(&mut stream_rng(3, Stream::SceneLayout, 0));
        let mut relabeled = scene.clone();
        for obj in &mut relabeled.objects {
            obj.spec.color = Color::Green;
            obj.spec.material = Material::Flat;
        }
        let a = render_views(&scene, &mut stream_rng(0, Stream::Stylize, 0));
        let b = render_views(&relabeled, &mut stream_rng(0, Stream::Stylize, 0));
        assert_eq!(a.structure, b.structure);
        assert_ne!(a.natural, b.natural);
    }

    #[test]
    fn structure_levels_depend_on_stacking_rank() {
        let scene = one_square(Color::Red, Material::Flat);
        let views = render_views(&scene, &mut stream_rng(0, Stream::Stylize, 0));
        let p = (16 * CANVAS + 16) * 3;
        assert!((views.structure[p] as f64 - 0.95).abs() < 1e-6);
        let bg = (60 * CANVAS + 60) * 3;
        assert!((views.structure[bg] as f64 - BG_STRUCTURE).abs() < 1e-6);
    }

    #[test]
    fn stylized_shifts_channel_means() {
        let scene = one_square(Color::Blue, Material::Flat);
        // Find a stylization draw with a non-identity permutation: blue has a
        // dominant third channel, so swapping channels must move the means.
        for idx in 0..32 {
            let mut rng = stream_rng(4, Stream::Stylize, idx);
            let perm = PERMS[rng.gen_range(0..PERMS.len())];
            if perm == [0, 1, 2] {
                continue;
            }
            let views = render_views(&scene, &mut stream_rng(4, Stream::Stylize, idx));
            let diff: f64 = (0..3)
                .map(|c| (mean_channel(&views.stylized, c) - mean_channel(&views.natural, c)).abs())
                .sum();
            assert!(diff > 1e-3, "permutation {perm:?} left means unchanged");
            return;
        }
        panic!("no non-identity permutation in 32 draws");
    }

    #[test]
    fn paste_gate_can_be_identity() {
        let scene = sample_scene(&mut stream_rng(6, Stream::SceneLayout, 0));
        let views = render_views(&scene, &mut stream_rng(6, Stream::Stylize, 0));
        let mut hit_identity = false;
        let mut hit_paste = false;
        for idx in 0..64 {
            let mut rng = stream_rng(6, Stream::CropPaste, idx);
            match sample_paste(&mut rng) {
                None => {
                    let mut rng = stream_rng(6, Stream::CropPaste, idx);
                    let (v, s) = crop_paste(&views, &scene, &mut rng);
                    assert_eq!(v, views);
                    assert_eq!(s, scene);
                    hit_identity = true;
                }
                Some(op) => {
                    assert!(op.side >= 16 && op.side <= 32);
                    assert!(op.dst_side >= 8 && op.dst_side <= CANVAS);
                    assert!(op.src[0] + op.side <= CANVAS && op.src[1] + op.side <= CANVAS);
                    assert!(op.dst[0] + op.dst_side <= CANVAS && op.dst[1] + op.dst_side <= CANVAS);
                    hit_paste = true;
                }
            }
            if hit_identity && hit_paste {
                return;
            }
        }
        panic!("64 draws never covered both gate branches");
    }

    #[test]
    fn paste_copies_the_same_rect_into_every_view() {
        let scene = sample_scene(&mut stream_rng(8, Stream::SceneLayout, 1));
        let views = render_views(&scene, &mut stream_rng(8, Stream::Stylize, 1));
        let op = PasteOp {
            src: [4, 10],
            side: 20,
            dst: [30, 40],
            dst_side: 10,
        };
        let (pasted, _, _) = op.apply(&views, &scene, &[]);
        for (orig, new) in [
            (&views.natural, &pasted.natural),
            (&views.structure, &pasted.structure),
            (&views.stylized, &pasted.stylized),
        ] {
            for r in 0..op.dst_side {
                for c in 0..op.dst_side {
                    let sr = op.src[1] + r * op.side / op.dst_side;
                    let sc = op.src[0] + c * op.side / op.dst_side;
                    let to = ((op.dst[1] + r) * CANVAS + op.dst[0] + c) * 3;
                    let from = (sr * CANVAS + sc) * 3;
                    assert_eq!(&new[to..to + 3], &orig[from..from + 3]);
                }
            }
            // outside the destination rectangle nothing moved
            for y in 0..CANVAS {
                for x in 0..CANVAS {
                    let in_rect = y >= op.dst[1]
                        && y < op.dst[1] + op.dst_side
                        && x >= op.dst[0]
                        && x < op.dst[0] + op.dst_side;
                    if !in_rect {
                        let p = (y * CANVAS + x) * 3;
                        assert_eq!(&new[p..p + 3], &orig[p..p + 3]);
                    }
                }
            }
        }
    }

    #[test]
    fn paste_covering_an_object_drops_it() {
        let scene = one_square(Color::Cyan, Material::Flat);
        let views = render_views(&scene, &mut stream_rng(0, Stream::Stylize, 0));
        let op = PasteOp {
            src: [40, 40],
            side: 20,
            dst: [8, 8],
            dst_side: 16,
        };
        let (_, after, _) = op.apply(&views, &scene, &[]);
        assert!(after.objects.is_empty());
    }

    #[test]
    fn paste_keeps_masks_disjoint_and_boxes_tight() {
        for i in 0..1000 {
            let scene = sample_scene(&mut stream_rng(12, Stream::SceneLayout, i));
            let views = render_views(&scene, &mut stream_rng(12, Stream::Stylize, i));
            let (_, after) = crop_paste(&views, &scene, &mut stream_rng(12, Stream::CropPaste, i));
            for (j, obj) in after.objects.iter().enumerate() {
                let (y0, x0, y1, x1) = obj.mask.tight_bounds().expect("dropped if empty");
                assert_eq!(
                    obj.bbox,
                    BBox::from_pixel_bounds(y0, x0, y1, x1, CANVAS, CANVAS)
                );
                for other in &after.objects[j + 1..] {
                    assert_eq!(obj.mask.intersection_count(&other.mask), 0);
                }
            }
        }
    }
}
