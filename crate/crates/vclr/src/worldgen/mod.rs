//! Procedural open-world benchmark: seeded scene sampling on a 64x64 canvas,
//! three appearance views of each scene, a noisy class-agnostic proposal
//! oracle, crop-paste augmentation, and on-disk dataset plumbing.
//!
//! The class split is attribute-based: objects that are red *and* checkered
//! form the known class; everything else is unknown. Training records expose
//! only known objects as ground truth, while proposals cover every object —
//! that asymmetry is the whole point of the benchmark.

mod dataset;
mod proposals;
mod render;
mod scene;

pub use dataset::{
    gt_objects, load_split, write_dataset, DatasetError, DatasetReader, GtObject, Manifest,
    Record, Split,
};
pub use proposals::{oracle_proposals, Proposal, ProposalNoise, MAX_PROPOSALS, NMS_IOU};
pub use render::{
    crop_paste, crop_paste_with_proposals, render_views, sample_paste, PasteOp, ViewKind, ViewSet,
};
pub use scene::{
    sample_scene, Color, Material, ObjectSpec, SceneObject, SceneSpec, Shape, CANVAS,
    MIN_CENTER_DIST, SIZE_RANGE,
};
#[cfg(test)]
pub(crate) use scene::rasterize;
