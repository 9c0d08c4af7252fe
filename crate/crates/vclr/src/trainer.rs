//! The training loop: supervised learning on known-class annotations plus an
//! optional teacher–student consistency branch anchored on object proposals.
//!
//! Each image in a batch may be crop-paste augmented, then the student
//! forwards one randomly drawn view. When the matched losses are enabled, the
//! EMA teacher forwards the natural view, object proposals are matched
//! independently against both branches, and the joined triplets drive a
//! proposal-supervised structured loss plus a cosine pull between paired
//! query embeddings. Ground-truth supervision only ever sees known-class
//! objects. The teacher tracks the student's pre-step weights: a step runs
//! zero grads → backward → EMA update → optimizer.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{BBox, BitMask};
use crate::losses::{
    cosine_mean_distance, matched_set_loss, total_loss, Background, LossError, LossWeights,
    ObjLossWeights, PredictionView,
};
use crate::model::{forward, image_tensor, init_params, DetectorConfig, ModelError};
use crate::ndtensor::{
    no_grad, save_checkpoint, AdamW, AdamWConfig, CheckpointError, EmaTracker, ParamStore, Tensor,
    TensorError,
};
use crate::setmatch::{
    assign, build_cost, form_triplets, Candidates, CostWeights, MatchError, MatchTarget,
};
use crate::util::{stream_rng, Stream};
use crate::worldgen::{
    crop_paste_with_proposals, gt_objects, DatasetError, DatasetReader, GtObject, ObjectSpec,
    Proposal, Record, SceneObject, SceneSpec, ViewKind, ViewSet,
};

/// Proposals overlapping a known-class GT box this tightly are dropped before
/// proposal matching, so an annotated object never gets a second, slightly
/// different regression target.
const DEDUP_IOU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad train config: {0}")]
    Config(String),
    #[error("loss went non-finite at step {step} (batch records {records:?})")]
    NonFinite { step: usize, records: Vec<usize> },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("config serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// configuration

/// Everything one training run depends on. `Default` is the full recipe with
/// seed 0; `baseline` turns the consistency machinery off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of the run after which the learning rate is multiplied once
    /// by `lr_decay_factor`.
    pub lr_decay_at: f64,
    pub lr_decay_factor: f64,
    pub ema_momentum: f64,
    /// Views the student may be shown. The teacher always gets `natural`.
    pub views: Vec<ViewKind>,
    pub crop_paste: bool,
    /// Gate on the whole proposal-matched branch; 0 skips the teacher
    /// forward entirely.
    pub lambda_match: f64,
    pub lambda_obj: f64,
    pub lambda_sim: f64,
    pub lambda_gt: f64,
    /// Triplets whose weaker branch-to-proposal box IoU falls below this are
    /// discarded before either matched loss. Zero keeps everything.
    pub iou_floor: f64,
    /// Match ground truth only against queries already claimed by a triplet,
    /// instead of against all queries.
    pub lgt_on_matched_queries: bool,
    /// Push unmatched queries toward zero score inside the proposal loss too
    /// (by default only the ground-truth loss carries background).
    pub background_in_lobj: bool,
    pub detector: DetectorConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::vclr(0)
    }
}

impl TrainConfig {
    /// The full consistency recipe: all three views with crop-paste, the
    /// proposal loss, the cosine pull, and quality filtering.
    pub fn vclr(seed: u64) -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-4,
            lr_decay_at: 0.875,
            lr_decay_factor: 0.1,
            ema_momentum: 0.99,
            views: ViewKind::ALL.to_vec(),
            crop_paste: true,
            lambda_match: 1.0,
            lambda_obj: 1.0,
            lambda_sim: 1.0,
            lambda_gt: 1.0,
            iou_floor: 0.5,
            lgt_on_matched_queries: false,
            background_in_lobj: false,
            detector: DetectorConfig::default(),
            seed,
        }
    }

    /// Supervised-only training: natural view, no augmentation, no matched
    /// losses.
    pub fn baseline(seed: u64) -> Self {
        TrainConfig {
            views: vec![ViewKind::Natural],
            crop_paste: false,
            lambda_match: 0.0,
            lambda_sim: 0.0,
            iou_floor: 0.0,
            ..TrainConfig::vclr(seed)
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.views.is_empty() {
            return bad("views must name at least one view".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return bad(format!("ema_momentum must be in [0, 1), got {}", self.ema_momentum));
        }
        if !(0.0..=1.0).contains(&self.lr_decay_at) {
            return bad(format!("lr_decay_at must be in [0, 1], got {}", self.lr_decay_at));
        }
        if !(0.0..=1.0).contains(&self.iou_floor) {
            return bad(format!("iou_floor must be in [0, 1], got {}", self.iou_floor));
        }
        let lambdas = [
            ("lambda_match", self.lambda_match),
            ("lambda_obj", self.lambda_obj),
            ("lambda_sim", self.lambda_sim),
            ("lambda_gt", self.lambda_gt),
            ("weight_decay", self.weight_decay),
            ("lr_decay_factor", self.lr_decay_factor),
        ];
        for (name, v) in lambdas {
            if !(v >= 0.0) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.lambda_gt == 0.0 && (self.lambda_match == 0.0 || self.lambda_obj + self.lambda_sim == 0.0)
        {
            return bad("no loss term is enabled".into());
        }
        if self.lgt_on_matched_queries && self.lambda_match == 0.0 {
            return bad("lgt_on_matched_queries needs the matched branch (lambda_match > 0)".into());
        }
        Ok(())
    }

    /// Step learning rate: the base rate until `lr_decay_at` of the run is
    /// done, then once multiplied by `lr_decay_factor`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if (step as f64) >= self.lr_decay_at * self.iterations as f64 {
            self.lr * self.lr_decay_factor
        } else {
            self.lr
        }
    }
}

/// The cumulative recipe ladder; each row adds one ingredient to the last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationRow {
    /// Known-class supervision only.
    GtOnly,
    /// Adds the proposal-matched structured loss and crop-paste augmentation.
    AddProposalLoss,
    /// Adds structure/stylized student views.
    AddViews,
    /// Adds the cross-branch query consistency pull.
    AddConsistency,
    /// Adds localization-quality filtering of the triplets.
    AddQualityFilter,
}

impl AblationRow {
    pub const ALL: [AblationRow; 5] = [
        AblationRow::GtOnly,
        AblationRow::AddProposalLoss,
        AblationRow::AddViews,
        AblationRow::AddConsistency,
        AblationRow::AddQualityFilter,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationRow::GtOnly => "gt_only",
            AblationRow::AddProposalLoss => "add_proposal_loss",
            AblationRow::AddViews => "add_views",
            AblationRow::AddConsistency => "add_consistency",
            AblationRow::AddQualityFilter => "add_quality_filter",
        }
    }

    /// The train config for this row, applying every ingredient up to and
    /// including it. The last row equals `TrainConfig::vclr`.
    pub fn config(self, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::baseline(seed);
        if self >= AblationRow::AddProposalLoss {
            c.lambda_match = 1.0;
            c.crop_paste = true;
        }
        if self >= AblationRow::AddViews {
            c.views = ViewKind::ALL.to_vec();
        }
        if self >= AblationRow::AddConsistency {
            c.lambda_sim = 1.0;
        }
        if self >= AblationRow::AddQualityFilter {
            c.iou_floor = 0.5;
        }
        c
    }
}

impl std::fmt::Display for AblationRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

// ---------------------------------------------------------------------------
// state and per-step bookkeeping

/// Live training state: student weights, their EMA shadow, and the optimizer.
pub struct RunState {
    pub cfg: TrainConfig,
    pub params: ParamStore,
    pub teacher: EmaTracker,
    pub opt: AdamW,
    pub step: usize,
}

impl RunState {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let params = init_params(&cfg.detector, cfg.seed);
        let teacher = EmaTracker::new(&params, cfg.ema_momentum);
        let opt = AdamW::new(AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        });
        Ok(RunState { cfg, params, teacher, opt, step: 0 })
    }
}

/// Batch-mean loss components of one finished step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    /// The step these numbers belong to (counted from 0).
    pub step: usize,
    pub l_gt: f64,
    pub l_obj: f64,
    pub l_sim: f64,
    pub total: f64,
    pub lr: f64,
    /// Mean surviving triplet count per image.
    pub mean_triplets: f64,
}

/// The records trained on at `step`: i.i.d. uniform draws with replacement.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, n_records: usize) -> Vec<usize> {
    let mut rng = stream_rng(seed, Stream::DataOrder, step);
    (0..batch_size).map(|_| rng.gen_range(0..n_records)).collect()
}

// ---------------------------------------------------------------------------
// per-image loss

/// Draws the student's view uniformly from `allowed`. Consumes exactly one
/// RNG value regardless of the set size, so view-choice streams stay aligned
/// across configs that differ only in the allowed set.
fn pick_view<'a>(
    views: &'a ViewSet,
    allowed: &[ViewKind],
    rng: &mut impl Rng,
) -> (ViewKind, &'a [f32]) {
    let draw = rng.gen::<u64>();
    let kind = allowed[(draw % allowed.len() as u64) as usize];
    (kind, views.view(kind))
}

fn scene_from_gt(gt: &[GtObject]) -> SceneSpec {
    SceneSpec {
        objects: gt
            .iter()
            .map(|g| SceneObject {
                spec: ObjectSpec {
                    shape: g.shape,
                    color: g.color,
                    material: g.material,
                    center: g.center,
                    size: g.size,
                    z: g.z,
                },
                mask: g.mask.clone(),
                bbox: g.bbox,
            })
            .collect(),
    }
}

struct ImageLoss {
    total: Tensor,
    l_gt: f64,
    l_obj: f64,
    l_sim: f64,
    triplets: usize,
}

/// One image's loss graph. `image_index` keys the augmentation and view
/// streams, so the same record drawn twice in a batch still augments
/// independently.
fn image_loss(
    cfg: &TrainConfig,
    student: &ParamStore,
    teacher: Option<&ParamStore>,
    record: &Record,
    image_index: u64,
) -> Result<ImageLoss, TrainError> {
    let (views, gt, proposals): (ViewSet, Vec<GtObject>, Vec<Proposal>) = if cfg.crop_paste {
        let mut rng = stream_rng(cfg.seed, Stream::CropPaste, image_index);
        let scene = scene_from_gt(&record.gt);
        let (v, s, p) =
            crop_paste_with_proposals(&record.views, &scene, &record.proposals, &mut rng);
        (v, gt_objects(&s), p)
    } else {
        (record.views.clone(), record.gt.clone(), record.proposals.clone())
    };

    // whatever the split put on disk, supervision stays known-class only
    let knowns: Vec<&GtObject> = gt.iter().filter(|g| g.known).collect();

    let mut view_rng = stream_rng(cfg.seed, Stream::ViewChoice, image_index);
    let (_, student_view) = pick_view(&views, &cfg.views, &mut view_rng);
    let student_out = forward(&cfg.detector, student, &image_tensor(student_view, &cfg.detector)?)?;
    let student_cands = student_out.candidates();
    let pred = PredictionView {
        score_logits: &student_out.score_logits,
        boxes: &student_out.boxes,
        mask_logits: &student_out.mask_logits,
    };
    let cost_w = CostWeights::default();
    let obj_w = ObjLossWeights::default();

    let mut matched_queries: Vec<usize> = Vec::new();
    let (l_obj, l_sim, n_triplets) = match teacher {
        Some(teacher) if cfg.lambda_match > 0.0 => {
            let natural = image_tensor(&views.natural, &cfg.detector)?;
            let teacher_out = no_grad(|| forward(&cfg.detector, teacher, &natural))?;

            let kept: Vec<&Proposal> = proposals
                .iter()
                .filter(|p| knowns.iter().all(|g| p.bbox.iou(&g.bbox) < DEDUP_IOU))
                .collect();
            let targets: Vec<MatchTarget> =
                kept.iter().map(|p| MatchTarget { bbox: p.bbox, mask: &p.mask }).collect();
            let boxes: Vec<BBox> = kept.iter().map(|p| p.bbox).collect();
            let triplets = form_triplets(
                &targets,
                &boxes,
                &teacher_out.candidates(),
                &student_cands,
                &cost_w,
                cfg.iou_floor,
            )?;

            let pairs: Vec<(usize, usize)> =
                triplets.iter().map(|t| (t.student, t.proposal)).collect();
            matched_queries = triplets.iter().map(|t| t.student).collect();
            let masks: Vec<&BitMask> = kept.iter().map(|p| &p.mask).collect();
            let background =
                if cfg.background_in_lobj { Background::Unmatched } else { Background::Skip };
            let l_obj = matched_set_loss(&pred, &pairs, &boxes, &masks, &obj_w, background)?;

            let l_sim = if triplets.is_empty() {
                Tensor::scalar(0.0)
            } else {
                let s_rows: Vec<usize> = triplets.iter().map(|t| t.student).collect();
                let t_rows: Vec<usize> = triplets.iter().map(|t| t.teacher).collect();
                cosine_mean_distance(
                    &student_out.queries.index_select0(&s_rows)?,
                    &teacher_out.queries.index_select0(&t_rows)?,
                )?
            };
            (l_obj, l_sim, triplets.len())
        }
        _ => (Tensor::scalar(0.0), Tensor::scalar(0.0), 0),
    };

    let gt_boxes: Vec<BBox> = knowns.iter().map(|g| g.bbox).collect();
    let gt_masks: Vec<&BitMask> = knowns.iter().map(|g| &g.mask).collect();
    let gt_targets: Vec<MatchTarget> =
        knowns.iter().map(|g| MatchTarget { bbox: g.bbox, mask: &g.mask }).collect();
    let pairs: Vec<(usize, usize)> = if knowns.is_empty() {
        Vec::new()
    } else if cfg.lgt_on_matched_queries {
        // restrict the pool to triplet-claimed queries; with no triplets the
        // image contributes background supervision only
        if matched_queries.is_empty() {
            Vec::new()
        } else {
            let hw = student_cands.hw;
            let sub = Candidates {
                scores: matched_queries.iter().map(|&q| student_cands.scores[q]).collect(),
                boxes: matched_queries.iter().map(|&q| student_cands.boxes[q]).collect(),
                mask_probs: matched_queries
                    .iter()
                    .flat_map(|&q| student_cands.mask_probs[q * hw..(q + 1) * hw].iter().copied())
                    .collect(),
                hw,
            };
            assign(&build_cost(&sub, &gt_targets, &cost_w)?)?
                .pairs
                .iter()
                .map(|&(t, q)| (matched_queries[q], t))
                .collect()
        }
    } else {
        assign(&build_cost(&student_cands, &gt_targets, &cost_w)?)?
            .pairs
            .iter()
            .map(|&(t, q)| (q, t))
            .collect()
    };
    let l_gt = matched_set_loss(&pred, &pairs, &gt_boxes, &gt_masks, &obj_w, Background::Unmatched)?;

    let weights = LossWeights {
        l_match: cfg.lambda_match,
        l_obj: cfg.lambda_obj,
        l_sim: cfg.lambda_sim,
        l_gt: cfg.lambda_gt,
    };
    let total = total_loss(&l_obj, &l_sim, &l_gt, &weights)?;
    Ok(ImageLoss {
        l_gt: l_gt.item()?,
        l_obj: l_obj.item()?,
        l_sim: l_sim.item()?,
        total,
        triplets: n_triplets,
    })
}

// ---------------------------------------------------------------------------
// steps and runs

/// One optimization step over `batch`. The teacher is updated from the
/// student's pre-step weights, then the optimizer moves the student.
pub fn train_step(state: &mut RunState, batch: &[&Record]) -> Result<LossReport, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Config("train_step got an empty batch".into()));
    }
    let cfg = state.cfg.clone();
    let n = batch.len() as f64;

    let mut sum: Option<Tensor> = None;
    let (mut gt_sum, mut obj_sum, mut sim_sum, mut triplet_sum) = (0.0, 0.0, 0.0, 0usize);
    for (slot, record) in batch.iter().enumerate() {
        let image_index = state.step as u64 * cfg.batch_size as u64 + slot as u64;
        let teacher =
            if cfg.lambda_match > 0.0 { Some(state.teacher.shadow()) } else { None };
        let part = match image_loss(&cfg, &state.params, teacher, record, image_index) {
            Ok(part) => part,
            // a NaN forward pass surfaces in the cost matrix first; report it
            // with training coordinates rather than matrix ones
            Err(TrainError::Match(MatchError::NonFinite { .. })) => {
                return Err(TrainError::NonFinite {
                    step: state.step,
                    records: batch.iter().map(|r| r.index).collect(),
                });
            }
            Err(e) => return Err(e),
        };
        gt_sum += part.l_gt;
        obj_sum += part.l_obj;
        sim_sum += part.l_sim;
        triplet_sum += part.triplets;
        sum = Some(match sum {
            None => part.total,
            Some(acc) => acc.add(&part.total)?,
        });
    }
    let mean = sum.expect("non-empty batch").mul_scalar(1.0 / n);
    let total = mean.item()?;
    if !total.is_finite() {
        return Err(TrainError::NonFinite {
            step: state.step,
            records: batch.iter().map(|r| r.index).collect(),
        });
    }

    state.params.zero_grads();
    mean.backward()?;
    // EMA first: the shadow must blend in the weights this gradient was
    // computed at, not the post-step ones
    state.teacher.update(&state.params)?;
    let lr = cfg.lr_at(state.step);
    state.opt.cfg.lr = lr;
    state.opt.step(&mut state.params)?;

    let report = LossReport {
        step: state.step,
        l_gt: gt_sum / n,
        l_obj: obj_sum / n,
        l_sim: sim_sum / n,
        total,
        lr,
        mean_triplets: triplet_sum as f64 / n,
    };
    state.step += 1;
    Ok(report)
}

/// Where a finished run left its artifacts.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub steps: usize,
    pub final_loss: f64,
    pub checkpoints: Vec<PathBuf>,
}

fn write_text(path: &Path, text: &str) -> Result<(), TrainError> {
    fs::write(path, text).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Trains on the dataset at `dataset_dir` and writes the run directory:
/// `config.json` (the exact config), `losses.csv` (one row per step),
/// `ckpt_{25,50,75,100}.bin` (student weights at quarter marks), and
/// `manifest.json` (dataset fingerprint, step count, wall-clock stamp).
/// Everything except the manifest's timestamp is byte-reproducible.
pub fn run(cfg: &TrainConfig, dataset_dir: &Path, out_dir: &Path) -> Result<RunSummary, TrainError> {
    cfg.validate()?;
    let records = DatasetReader::open(dataset_dir)?.load_all()?;
    if records.is_empty() {
        return Err(TrainError::Config(format!("dataset at {} is empty", dataset_dir.display())));
    }
    let manifest_path = dataset_dir.join("manifest.json");
    let manifest_bytes = fs::read(&manifest_path)
        .map_err(|source| TrainError::Io { path: manifest_path, source })?;

    fs::create_dir_all(out_dir)
        .map_err(|source| TrainError::Io { path: out_dir.to_path_buf(), source })?;
    write_text(&out_dir.join("config.json"), &format!("{}\n", serde_json::to_string_pretty(cfg)?))?;

    let marks: Vec<(u32, usize)> =
        [25u32, 50, 75, 100].iter().map(|&p| (p, (cfg.iterations * p as usize).div_ceil(100))).collect();

    let mut state = RunState::new(cfg.clone())?;
    let mut csv = String::from("step,l_gt,l_obj,l_sim,total,lr\n");
    let mut checkpoints = Vec::new();
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.iterations {
        let idx = batch_indices(cfg.seed, state.step as u64, cfg.batch_size, records.len());
        let batch: Vec<&Record> = idx.iter().map(|&i| &records[i]).collect();
        let r = train_step(&mut state, &batch)?;
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.step, r.l_gt, r.l_obj, r.l_sim, r.total, r.lr
        ));
        final_loss = r.total;
        for &(pct, at) in &marks {
            if state.step == at {
                let path = out_dir.join(format!("ckpt_{pct}.bin"));
                let meta = serde_json::json!({
                    "steps": state.step,
                    "seed": cfg.seed,
                    "detector": cfg.detector,
                });
                save_checkpoint(&state.params, meta, &path)?;
                checkpoints.push(path);
            }
        }
    }
    write_text(&out_dir.join("losses.csv"), &csv)?;

    // the run manifest is the one artifact allowed to differ between
    // identical runs (it carries the wall clock)
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let manifest = serde_json::json!({
        "dataset_manifest_fnv64": format!("{:016x}", fnv1a64(&manifest_bytes)),
        "created_unix_s": stamp,
        "steps": state.step,
        "seed": cfg.seed,
        "final_loss": final_loss,
    });
    write_text(&out_dir.join("manifest.json"), &format!("{}\n", serde_json::to_string_pretty(&manifest)?))?;

    Ok(RunSummary { out_dir: out_dir.to_path_buf(), steps: state.step, final_loss, checkpoints })
}
