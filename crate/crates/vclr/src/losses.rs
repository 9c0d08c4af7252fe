//! Differentiable training losses over matched prediction/target pairs, plus
//! the cross-branch query consistency distance.

use thiserror::Error;

use crate::geom::{BBox, BitMask};
use crate::ndtensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("query embedding {index} has zero norm; cosine distance is undefined")]
    ZeroNorm { index: usize },
    #[error("loss inputs disagree: {0}")]
    BadInput(String),
}

/// Weights of the five structured-loss terms.
#[derive(Debug, Clone, Copy)]
pub struct ObjLossWeights {
    pub dice: f64,
    pub mask: f64,
    pub score: f64,
    pub box_l1: f64,
    pub giou: f64,
}

impl Default for ObjLossWeights {
    fn default() -> Self {
        ObjLossWeights { dice: 1.0, mask: 1.0, score: 1.0, box_l1: 5.0, giou: 2.0 }
    }
}

/// Top-level combination weights.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub l_match: f64,
    pub l_obj: f64,
    pub l_sim: f64,
    pub l_gt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { l_match: 1.0, l_obj: 1.0, l_sim: 1.0, l_gt: 1.0 }
    }
}

const DICE_EPS: f64 = 1.0;
const FOCAL_ALPHA: f64 = 0.25;
const FOCAL_GAMMA_IS_TWO: () = (); // the (1-p)^2 factors below assume gamma=2

/// Soft dice loss over `[k, hw]` mask logits against binary targets:
/// mean_k of 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps).
pub fn dice_loss(mask_logits: &Tensor, target_masks: &Tensor) -> Result<Tensor, LossError> {
    let probs = mask_logits.sigmoid();
    let inter = probs.mul(target_masks)?.sum_axis(1, false)?;
    let den = probs
        .sum_axis(1, false)?
        .add(&target_masks.sum_axis(1, false)?)?
        .add_scalar(DICE_EPS);
    let dice = inter.mul_scalar(2.0).add_scalar(DICE_EPS).div(&den)?;
    Ok(dice.rsub_scalar(1.0).mean_all()?)
}

/// Per-pixel binary cross entropy with logits, averaged over everything.
/// Uses softplus(z) - z*t, which is exact and stable for any magnitude.
pub fn mask_bce_loss(mask_logits: &Tensor, target_masks: &Tensor) -> Result<Tensor, LossError> {
    let loss = mask_logits.softplus().sub(&mask_logits.mul(target_masks)?)?;
    Ok(loss.mean_all()?)
}

/// Focal term for positive targets: alpha * (1-p)^2 * -log(p), elementwise
/// over logits, where -log(p) = softplus(-z).
fn focal_positive(logits: &Tensor) -> Tensor {
    #[allow(clippy::let_unit_value)]
    let _ = FOCAL_GAMMA_IS_TWO;
    let p = logits.sigmoid();
    let one_minus = p.rsub_scalar(1.0);
    one_minus
        .mul(&one_minus)
        .expect("same shape")
        .mul(&logits.neg().softplus())
        .expect("same shape")
        .mul_scalar(FOCAL_ALPHA)
}

/// Focal term for negative targets: (1-alpha) * p^2 * -log(1-p).
fn focal_negative(logits: &Tensor) -> Tensor {
    let p = logits.sigmoid();
    p.mul(&p)
        .expect("same shape")
        .mul(&logits.softplus())
        .expect("same shape")
        .mul_scalar(1.0 - FOCAL_ALPHA)
}

/// How unmatched queries enter the score loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Background {
    /// Score loss averages focal terms over matched queries only.
    Skip,
    /// Unmatched queries are pushed toward score zero. Matched terms are
    /// normalized by the pair count, background terms by the query count.
    Unmatched,
}

/// Focal objectness loss over `[n]` score logits given the matched query
/// indices. See `Background` for the two normalizations.
pub fn focal_score_loss(
    score_logits: &Tensor,
    matched: &[usize],
    background: Background,
) -> Result<Tensor, LossError> {
    let n = score_logits.numel();
    let pos_sum = if matched.is_empty() {
        Tensor::scalar(0.0)
    } else {
        focal_positive(&score_logits.index_select0(matched)?).sum_all()
    };
    match background {
        Background::Skip => {
            let k = matched.len().max(1) as f64;
            Ok(pos_sum.mul_scalar(1.0 / k))
        }
        Background::Unmatched => {
            let unmatched: Vec<usize> = (0..n).filter(|q| !matched.contains(q)).collect();
            let neg_sum = if unmatched.is_empty() {
                Tensor::scalar(0.0)
            } else {
                focal_negative(&score_logits.index_select0(&unmatched)?).sum_all()
            };
            let k = matched.len().max(1) as f64;
            Ok(pos_sum
                .mul_scalar(1.0 / k)
                .add(&neg_sum.mul_scalar(1.0 / n.max(1) as f64))?)
        }
    }
}

/// Mean over pairs of the coordinate-wise L1 distance between `[k, 4]`
/// center-size boxes.
pub fn box_l1_loss(pred_boxes: &Tensor, target_boxes: &Tensor) -> Result<Tensor, LossError> {
    let per_pair = pred_boxes.sub(target_boxes)?.abs().sum_axis(1, false)?;
    Ok(per_pair.mean_all()?)
}

/// Differentiable GIoU on `[k, 4]` center-size boxes. Requires every pair to
/// have positive union and hull area (true for sigmoid-parameterized
/// predictions against non-degenerate targets).
pub fn giou_pairs(pred_boxes: &Tensor, target_boxes: &Tensor) -> Result<Tensor, LossError> {
    let corners = |b: &Tensor| -> Result<(Tensor, Tensor, Tensor, Tensor, Tensor), LossError> {
        let cx = b.slice(1, 0, 1)?;
        let cy = b.slice(1, 1, 2)?;
        let half_w = b.slice(1, 2, 3)?.mul_scalar(0.5);
        let half_h = b.slice(1, 3, 4)?.mul_scalar(0.5);
        let area = b.slice(1, 2, 3)?.relu().mul(&b.slice(1, 3, 4)?.relu())?;
        Ok((
            cx.sub(&half_w)?,
            cy.sub(&half_h)?,
            cx.add(&half_w)?,
            cy.add(&half_h)?,
            area,
        ))
    };
    let (ax0, ay0, ax1, ay1, area_a) = corners(pred_boxes)?;
    let (bx0, by0, bx1, by1, area_b) = corners(target_boxes)?;

    let iw = ax1.minimum(&bx1)?.sub(&ax0.maximum(&bx0)?)?.relu();
    let ih = ay1.minimum(&by1)?.sub(&ay0.maximum(&by0)?)?.relu();
    let inter = iw.mul(&ih)?;
    let union = area_a.add(&area_b)?.sub(&inter)?;
    let iou = inter.div(&union)?;

    let hw = ax1.maximum(&bx1)?.sub(&ax0.minimum(&bx0)?)?;
    let hh = ay1.maximum(&by1)?.sub(&ay0.minimum(&by0)?)?;
    let hull = hw.mul(&hh)?;
    Ok(iou.sub(&hull.sub(&union)?.div(&hull)?)?)
}

/// Mean of 1 - GIoU over matched pairs.
pub fn giou_loss(pred_boxes: &Tensor, target_boxes: &Tensor) -> Result<Tensor, LossError> {
    Ok(giou_pairs(pred_boxes, target_boxes)?.rsub_scalar(1.0).mean_all()?)
}

/// Mean of 1 - cos(a_i, b_i) over `[k, d]` row pairs. Zero-norm rows are an
/// error rather than a silent NaN.
pub fn cosine_mean_distance(a: &Tensor, b: &Tensor) -> Result<Tensor, LossError> {
    if a.shape() != b.shape() {
        return Err(LossError::Tensor(TensorError::ShapeMismatch {
            op: "cosine_mean_distance",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }));
    }
    let dots = a.mul(b)?.sum_axis(1, false)?;
    let na = a.mul(a)?.sum_axis(1, false)?.sqrt()?;
    let nb = b.mul(b)?.sum_axis(1, false)?.sqrt()?;
    for (i, (&x, &y)) in na.data().iter().zip(nb.data()).enumerate() {
        if x == 0.0 || y == 0.0 {
            return Err(LossError::ZeroNorm { index: i });
        }
    }
    let cos = dots.div(&na.mul(&nb)?)?;
    Ok(cos.rsub_scalar(1.0).mean_all()?)
}

// ---------------------------------------------------------------------------
// matched-set composition

/// Graph views of a detector's per-image outputs, as losses consume them.
pub struct PredictionView<'a> {
    /// `[n]` objectness logits.
    pub score_logits: &'a Tensor,
    /// `[n, 4]` center-size boxes in (0, 1).
    pub boxes: &'a Tensor,
    /// `[n, hw]` mask logits.
    pub mask_logits: &'a Tensor,
}

/// Constant tensors of the targets gathered in pair order.
pub fn pair_target_tensors(
    pair_targets: &[usize],
    boxes: &[BBox],
    masks: &[&BitMask],
) -> Result<(Tensor, Tensor), LossError> {
    if boxes.len() != masks.len() {
        return Err(LossError::BadInput(format!(
            "{} target boxes but {} target masks",
            boxes.len(),
            masks.len()
        )));
    }
    let k = pair_targets.len();
    let mut box_data = Vec::with_capacity(k * 4);
    let mut mask_data = Vec::new();
    let mut hw = None;
    for &t in pair_targets {
        let b = boxes.get(t).ok_or_else(|| {
            LossError::BadInput(format!("pair target {t} out of range ({})", boxes.len()))
        })?;
        box_data.extend_from_slice(&[b.cx, b.cy, b.w, b.h]);
        let m = masks[t];
        let this_hw = m.height() * m.width();
        if *hw.get_or_insert(this_hw) != this_hw {
            return Err(LossError::BadInput("target masks differ in size".into()));
        }
        for y in 0..m.height() {
            for x in 0..m.width() {
                mask_data.push(if m.get(y, x) { 1.0 } else { 0.0 });
            }
        }
    }
    let hw = hw.unwrap_or(0);
    Ok((
        Tensor::new(box_data, &[k, 4])?,
        Tensor::new(mask_data, &[k, hw])?,
    ))
}

/// The five-term loss over matched (query, target) pairs:
/// w_dice*dice + w_mask*bce + w_score*focal + w_box*l1 + w_giou*(1-giou).
///
/// With no pairs the geometric and mask terms vanish; the score term still
/// applies when `background` is `Unmatched`.
pub fn matched_set_loss(
    pred: &PredictionView,
    pairs: &[(usize, usize)],
    target_boxes: &[BBox],
    target_masks: &[&BitMask],
    w: &ObjLossWeights,
    background: Background,
) -> Result<Tensor, LossError> {
    let queries: Vec<usize> = pairs.iter().map(|&(q, _)| q).collect();
    let targets: Vec<usize> = pairs.iter().map(|&(_, t)| t).collect();

    let score = focal_score_loss(pred.score_logits, &queries, background)?;
    let mut total = score.mul_scalar(w.score);

    if !pairs.is_empty() {
        let (tb, tm) = pair_target_tensors(&targets, target_boxes, target_masks)?;
        let pb = pred.boxes.index_select0(&queries)?;
        let pm = pred.mask_logits.index_select0(&queries)?;
        let dice = dice_loss(&pm, &tm)?;
        let bce = mask_bce_loss(&pm, &tm)?;
        let l1 = box_l1_loss(&pb, &tb)?;
        let giou = giou_loss(&pb, &tb)?;
        total = total
            .add(&dice.mul_scalar(w.dice))?
            .add(&bce.mul_scalar(w.mask))?
            .add(&l1.mul_scalar(w.box_l1))?
            .add(&giou.mul_scalar(w.giou))?;
    }
    Ok(total)
}

/// total = w.l_match * (w.l_obj * obj + w.l_sim * sim) + w.l_gt * gt
pub fn total_loss(
    l_obj: &Tensor,
    l_sim: &Tensor,
    l_gt: &Tensor,
    w: &LossWeights,
) -> Result<Tensor, LossError> {
    let matched = l_obj
        .mul_scalar(w.l_obj)
        .add(&l_sim.mul_scalar(w.l_sim))?
        .mul_scalar(w.l_match);
    Ok(matched.add(&l_gt.mul_scalar(w.l_gt))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::gradcheck::assert_grads_match;
    use crate::util::{stream_rng, Stream};
    use rand::Rng;

    fn t(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::new(data, shape).unwrap()
    }

    fn p(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::param(data, shape).unwrap()
    }

    #[test]
    fn dice_hand_value() {
        // logits 0 -> p = 0.5 on 4 px; target covers 2 px
        // 1 - (2*1 + 1) / (2 + 2 + 1) = 0.4
        let logits = t(vec![0.0; 4], &[1, 4]);
        let target = t(vec![1.0, 1.0, 0.0, 0.0], &[1, 4]);
        let loss = dice_loss(&logits, &target).unwrap();
        assert!((loss.item().unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn bce_hand_value_and_stability() {
        let logits = t(vec![1.0], &[1, 1]);
        let target = t(vec![1.0], &[1, 1]);
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((mask_bce_loss(&logits, &target).unwrap().item().unwrap() - want).abs() < 1e-12);

        // huge logits stay finite
        let logits = t(vec![700.0, -700.0], &[1, 2]);
        let target = t(vec![1.0, 0.0], &[1, 2]);
        let loss = mask_bce_loss(&logits, &target).unwrap().item().unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-9);
    }

    #[test]
    fn focal_hand_value() {
        // z = 0: p = 0.5; positive term = 0.25 * 0.25 * ln 2
        let logits = t(vec![0.0], &[1]);
        let loss = focal_score_loss(&logits, &[0], Background::Skip).unwrap();
        assert!((loss.item().unwrap() - 0.25 * 0.25 * (2.0f64).ln()).abs() < 1e-12);

        // same logit unmatched: negative term = 0.75 * 0.25 * ln 2
        let loss = focal_score_loss(&logits, &[], Background::Unmatched).unwrap();
        assert!((loss.item().unwrap() - 0.75 * 0.25 * (2.0f64).ln()).abs() < 1e-12);

        // Skip ignores unmatched queries entirely
        let logits = t(vec![0.0, 100.0], &[2]);
        let skip = focal_score_loss(&logits, &[0], Background::Skip).unwrap();
        assert!((skip.item().unwrap() - 0.25 * 0.25 * (2.0f64).ln()).abs() < 1e-12);
        // ... and Unmatched punishes the confident stray
        let both = focal_score_loss(&logits, &[0], Background::Unmatched).unwrap();
        assert!(both.item().unwrap() > skip.item().unwrap());
    }

    #[test]
    fn giou_tensor_route_matches_plain_geometry() {
        let mut rng = stream_rng(41, Stream::Other(41), 0);
        for _ in 0..50 {
            let mut boxes = Vec::new();
            for _ in 0..2 {
                boxes.push(BBox::new(
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.05..0.4),
                    rng.gen_range(0.05..0.4),
                ));
            }
            let a = t(vec![boxes[0].cx, boxes[0].cy, boxes[0].w, boxes[0].h], &[1, 4]);
            let b = t(vec![boxes[1].cx, boxes[1].cy, boxes[1].w, boxes[1].h], &[1, 4]);
            let tensor_route = giou_pairs(&a, &b).unwrap().item().unwrap();
            let geom_route = boxes[0].giou(&boxes[1]);
            assert!(
                (tensor_route - geom_route).abs() < 1e-9,
                "{tensor_route} vs {geom_route}"
            );
        }
    }

    #[test]
    fn giou_loss_hand_value() {
        // disjoint corners of the unit square: giou -0.875, loss 1.875
        let a = t(vec![0.125, 0.125, 0.25, 0.25], &[1, 4]);
        let b = t(vec![0.875, 0.875, 0.25, 0.25], &[1, 4]);
        let loss = giou_loss(&a, &b).unwrap().item().unwrap();
        assert!((loss - 1.875).abs() < 1e-12);
    }

    #[test]
    fn cosine_distance_hand_values() {
        let a = t(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let parallel = t(vec![2.0, 0.0, 0.0, 3.0], &[2, 2]);
        assert!(cosine_mean_distance(&a, &parallel).unwrap().item().unwrap().abs() < 1e-12);

        let orthogonal = t(vec![0.0, 1.0, 1.0, 0.0], &[2, 2]);
        assert!((cosine_mean_distance(&a, &orthogonal).unwrap().item().unwrap() - 1.0).abs() < 1e-12);

        let opposite = t(vec![-1.0, 0.0, 0.0, -1.0], &[2, 2]);
        assert!((cosine_mean_distance(&a, &opposite).unwrap().item().unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_is_an_error() {
        let a = t(vec![0.0, 0.0], &[1, 2]);
        let b = t(vec![1.0, 0.0], &[1, 2]);
        assert!(matches!(
            cosine_mean_distance(&a, &b),
            Err(LossError::ZeroNorm { index: 0 })
        ));
    }

    #[test]
    fn loss_gradients_pass_finite_differences() {
        let mut rng = stream_rng(42, Stream::Other(42), 0);
        let logits = p((0..8).map(|_| rng.gen_range(-2.0..2.0)).collect(), &[2, 4]);
        let masks = t(vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0], &[2, 4]);
        assert_grads_match(std::slice::from_ref(&logits), |ins| {
            Ok(dice_loss(&ins[0], &masks).unwrap())
        });
        assert_grads_match(std::slice::from_ref(&logits), |ins| {
            Ok(mask_bce_loss(&ins[0], &masks).unwrap())
        });

        let score = p(vec![0.3, -0.7, 1.2], &[3]);
        assert_grads_match(std::slice::from_ref(&score), |ins| {
            Ok(focal_score_loss(&ins[0], &[1], Background::Unmatched).unwrap())
        });

        let pred = p(vec![0.4, 0.4, 0.3, 0.2, 0.6, 0.6, 0.2, 0.3], &[2, 4]);
        let target = t(vec![0.5, 0.5, 0.25, 0.25, 0.7, 0.6, 0.2, 0.2], &[2, 4]);
        assert_grads_match(std::slice::from_ref(&pred), |ins| {
            Ok(box_l1_loss(&ins[0], &target).unwrap())
        });
        assert_grads_match(std::slice::from_ref(&pred), |ins| {
            Ok(giou_loss(&ins[0], &target).unwrap())
        });

        let qa = p(vec![0.5, -0.2, 0.8, 0.1, 0.3, -0.9], &[2, 3]);
        let qb = t(vec![0.4, 0.1, 0.6, -0.2, 0.5, -0.5], &[2, 3]);
        assert_grads_match(std::slice::from_ref(&qa), |ins| {
            Ok(cosine_mean_distance(&ins[0], &qb).unwrap())
        });
    }

    #[test]
    fn detached_side_gets_no_gradient() {
        // the teacher enters the consistency term detached: only the student
        // side may receive gradient
        let student = p(vec![0.5, 0.2], &[1, 2]);
        let teacher = p(vec![0.1, 0.9], &[1, 2]);
        let loss = cosine_mean_distance(&teacher.detach(), &student).unwrap();
        student.set_grad_zero();
        teacher.set_grad_zero();
        loss.backward().unwrap();
        assert!(teacher.grad().unwrap().iter().all(|&g| g == 0.0));
        assert!(student.grad().unwrap().iter().any(|&g| g != 0.0));
    }

    fn tiny_prediction() -> (Tensor, Tensor, Tensor) {
        let score_logits = p(vec![0.2, -0.4, 0.9], &[3]);
        let boxes = p(
            vec![0.3, 0.3, 0.2, 0.2, 0.7, 0.7, 0.3, 0.3, 0.5, 0.5, 0.4, 0.4],
            &[3, 4],
        );
        let mask_logits = p((0..3 * 16).map(|i| (i as f64 * 0.37).sin()).collect(), &[3, 16]);
        (score_logits, boxes, mask_logits)
    }

    #[test]
    fn matched_set_loss_is_the_weighted_sum_of_its_parts() {
        let (score_logits, boxes, mask_logits) = tiny_prediction();
        let pred = PredictionView {
            score_logits: &score_logits,
            boxes: &boxes,
            mask_logits: &mask_logits,
        };
        let m0 = BitMask::from_fn(4, 4, |y, x| y < 2 && x < 2);
        let m1 = BitMask::from_fn(4, 4, |y, x| y >= 2 && x >= 1);
        let tboxes = [BBox::new(0.25, 0.25, 0.5, 0.5), BBox::new(0.6, 0.75, 0.6, 0.5)];
        let tmasks = [&m0, &m1];
        let pairs = [(2usize, 0usize), (0, 1)];
        let w = ObjLossWeights::default();

        let got = matched_set_loss(&pred, &pairs, &tboxes, &tmasks, &w, Background::Unmatched)
            .unwrap()
            .item()
            .unwrap();

        let queries = vec![2, 0];
        let targets = vec![0, 1];
        let (tb, tm) = pair_target_tensors(&targets, &tboxes, &tmasks).unwrap();
        let pb = boxes.index_select0(&queries).unwrap();
        let pm = mask_logits.index_select0(&queries).unwrap();
        let want = w.score
            * focal_score_loss(&score_logits, &queries, Background::Unmatched)
                .unwrap()
                .item()
                .unwrap()
            + w.dice * dice_loss(&pm, &tm).unwrap().item().unwrap()
            + w.mask * mask_bce_loss(&pm, &tm).unwrap().item().unwrap()
            + w.box_l1 * box_l1_loss(&pb, &tb).unwrap().item().unwrap()
            + w.giou * giou_loss(&pb, &tb).unwrap().item().unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn empty_pairs_leave_only_background_pressure() {
        let (score_logits, boxes, mask_logits) = tiny_prediction();
        let pred = PredictionView {
            score_logits: &score_logits,
            boxes: &boxes,
            mask_logits: &mask_logits,
        };
        let w = ObjLossWeights::default();
        let skip = matched_set_loss(&pred, &[], &[], &[], &w, Background::Skip).unwrap();
        assert_eq!(skip.item().unwrap(), 0.0);

        let bg = matched_set_loss(&pred, &[], &[], &[], &w, Background::Unmatched).unwrap();
        assert!(bg.item().unwrap() > 0.0);
        assert!(bg.requires_grad());
    }

    #[test]
    fn total_loss_respects_weights() {
        let obj = Tensor::scalar(2.0);
        let sim = Tensor::scalar(3.0);
        let gt = Tensor::scalar(5.0);
        let w = LossWeights { l_match: 1.0, l_obj: 1.0, l_sim: 1.0, l_gt: 1.0 };
        assert_eq!(total_loss(&obj, &sim, &gt, &w).unwrap().item().unwrap(), 10.0);

        let baseline = LossWeights { l_match: 0.0, ..w };
        assert_eq!(total_loss(&obj, &sim, &gt, &baseline).unwrap().item().unwrap(), 5.0);

        let half_sim = LossWeights { l_sim: 0.5, ..w };
        assert_eq!(total_loss(&obj, &sim, &gt, &half_sim).unwrap().item().unwrap(), 8.5);
    }
}
