//! Optimal assignment between prediction and target sets.
//!
//! The solver is the O(n^3) shortest-augmenting-path Hungarian method on an
//! internally squared matrix. Among equal-cost optima it returns the
//! lexicographically smallest pair list (row 0 takes its smallest feasible
//! column, then row 1, ...), so matchings are stable run to run.

use thiserror::Error;

use crate::geom::{BBox, BitMask};

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("cost matrix data length {len} does not match {rows}x{cols}")]
    BadShape { rows: usize, cols: usize, len: usize },
    #[error("cost matrix contains a non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("candidate sets disagree: {0}")]
    Candidates(String),
}

/// Dense row-major cost matrix; rows are targets, columns are predictions.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<CostMatrix, MatchError> {
        if data.len() != rows * cols {
            return Err(MatchError::BadShape { rows, cols, len: data.len() });
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(MatchError::NonFinite { row: bad / cols.max(1), col: bad % cols.max(1) });
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// A minimum-cost matching. `pairs` is sorted by row; every row or column
/// beyond `min(rows, cols)` stays unmatched.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total: f64,
}

impl Assignment {
    /// Column matched to `row`, if any.
    pub fn col_of(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(r, _)| r == row).map(|&(_, c)| c)
    }
}

/// Shortest-augmenting-path solve of a square cost matrix given as rows of
/// `size`. Returns (col_of_row, row potentials u, col potentials v). The
/// final potentials are dual feasible: cost[i][j] - u[i] - v[j] >= 0.
fn solve_square(size: usize, cost: &dyn Fn(usize, usize) -> f64) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    const INF: f64 = f64::INFINITY;
    let n = size;
    // 1-based arrays in the classic formulation; index 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // row matched to column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![usize::MAX; n];
    for j in 1..=n {
        if p[j] != 0 {
            col_of_row[p[j] - 1] = j - 1;
        }
    }
    (col_of_row, u[1..].to_vec(), v[1..].to_vec())
}

/// Total cost of an optimal assignment with some rows pre-committed to
/// columns. `fixed[r]` is the forced column of row r for r < fixed.len();
/// remaining rows and columns are solved freely. Dummy entries (padding past
/// the real matrix) cost zero.
fn solve_with_prefix(c: &CostMatrix, fixed: &[usize]) -> f64 {
    let size = c.rows.max(c.cols);
    let real = |r: usize, col: usize| -> f64 {
        if r < c.rows && col < c.cols {
            c.at(r, col)
        } else {
            0.0
        }
    };
    let mut fixed_total = 0.0;
    for (r, &col) in fixed.iter().enumerate() {
        fixed_total += real(r, col);
    }
    let free_rows: Vec<usize> = (fixed.len()..size).collect();
    let free_cols: Vec<usize> = (0..size).filter(|j| !fixed.contains(j)).collect();
    if free_rows.is_empty() {
        return fixed_total;
    }
    let cost = |i: usize, j: usize| real(free_rows[i], free_cols[j]);
    let (col_of_row, _, _) = solve_square(free_rows.len(), &cost);
    let sub: f64 = col_of_row
        .iter()
        .enumerate()
        .map(|(i, &j)| cost(i, j))
        .sum();
    fixed_total + sub
}

/// Minimum-cost assignment, lexicographically smallest among ties.
pub fn assign(c: &CostMatrix) -> Result<Assignment, MatchError> {
    if c.rows == 0 || c.cols == 0 {
        return Ok(Assignment { pairs: vec![], total: 0.0 });
    }
    let size = c.rows.max(c.cols);
    let real = |r: usize, col: usize| -> f64 {
        if r < c.rows && col < c.cols {
            c.at(r, col)
        } else {
            0.0
        }
    };
    let (base_cols, u, v) = solve_square(size, &|i, j| real(i, j));
    let base_total: f64 = (0..size).map(|i| real(i, base_cols[i])).sum();

    let scale = c.data.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let tol = 1e-9 * (1.0 + scale);

    // Fix rows in order to the smallest column that still reaches the
    // optimum. Dual feasibility lets us skip columns outright: forcing an
    // edge with positive reduced cost can only worsen the total.
    let mut fixed: Vec<usize> = Vec::with_capacity(c.rows.min(c.cols));
    let mut agrees_with_base = true;
    for r in 0..c.rows.min(size) {
        if fixed.len() >= size {
            break;
        }
        let mut chosen = None;
        for col in 0..size {
            if fixed.contains(&col) {
                continue;
            }
            let rc = real(r, col) - u[r] - v[col];
            if rc > tol {
                continue; // provably suboptimal
            }
            if agrees_with_base && col == base_cols[r] {
                chosen = Some(col);
                break;
            }
            let mut trial = fixed.clone();
            trial.push(col);
            let total = solve_with_prefix(c, &trial);
            if total <= base_total + tol {
                agrees_with_base = agrees_with_base && col == base_cols[r];
                chosen = Some(col);
                break;
            }
        }
        // Dual feasibility guarantees some zero-reduced-cost column works;
        // against float drift, fall back to the free column of least
        // reduced cost.
        let col = chosen.unwrap_or_else(|| {
            (0..size)
                .filter(|j| !fixed.contains(j))
                .min_by(|&a, &b| {
                    let ra = real(r, a) - u[r] - v[a];
                    let rb = real(r, b) - u[r] - v[b];
                    ra.partial_cmp(&rb).expect("finite costs")
                })
                .expect("a free column always exists")
        });
        agrees_with_base = agrees_with_base && col == base_cols[r];
        fixed.push(col);
    }

    let pairs: Vec<(usize, usize)> = fixed
        .iter()
        .enumerate()
        .filter(|&(r, &col)| r < c.rows && col < c.cols)
        .map(|(r, &col)| (r, col))
        .collect();
    let total = pairs.iter().map(|&(r, col)| c.at(r, col)).sum();
    Ok(Assignment { pairs, total })
}

// ---------------------------------------------------------------------------
// detection costs

/// Weights of the matching cost terms.
#[derive(Debug, Clone, Copy)]
pub struct CostWeights {
    pub score: f64,
    pub box_l1: f64,
    pub giou: f64,
    pub dice: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights { score: 2.0, box_l1: 5.0, giou: 2.0, dice: 2.0 }
    }
}

/// Detached per-image predictions, in the form the matcher consumes: scores
/// in [0, 1], boxes, and sigmoided mask probabilities flattened to `[n, hw]`.
pub struct Candidates {
    pub scores: Vec<f64>,
    pub boxes: Vec<BBox>,
    pub mask_probs: Vec<f64>,
    pub hw: usize,
}

impl Candidates {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn validate(&self, what: &str) -> Result<(), MatchError> {
        let n = self.scores.len();
        if self.boxes.len() != n || self.mask_probs.len() != n * self.hw {
            return Err(MatchError::Candidates(format!(
                "{what}: {} scores, {} boxes, {} mask values for hw={}",
                n,
                self.boxes.len(),
                self.mask_probs.len(),
                self.hw
            )));
        }
        Ok(())
    }
}

/// A matching target: a box plus its binary mask.
pub struct MatchTarget<'a> {
    pub bbox: BBox,
    pub mask: &'a BitMask,
}

const DICE_EPS: f64 = 1.0;

/// cost[t][q] = -w_s * score + w_b * l1 + w_g * (-giou) + w_d * dice_cost,
/// with the soft-dice cost 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps).
pub fn build_cost(
    cands: &Candidates,
    targets: &[MatchTarget],
    w: &CostWeights,
) -> Result<CostMatrix, MatchError> {
    cands.validate("candidates")?;
    let n = cands.len();
    let hw = cands.hw;
    // per-query probability mass, shared by every row
    let prob_sums: Vec<f64> = (0..n)
        .map(|q| cands.mask_probs[q * hw..(q + 1) * hw].iter().sum())
        .collect();

    let mut data = vec![0.0; targets.len() * n];
    for (t, target) in targets.iter().enumerate() {
        if target.mask.height() * target.mask.width() != hw {
            return Err(MatchError::Candidates(format!(
                "target {t} mask is {}x{}, but candidates flatten {} pixels",
                target.mask.height(),
                target.mask.width(),
                hw
            )));
        }
        let support: Vec<usize> = (0..hw)
            .filter(|&p| target.mask.get(p / target.mask.width(), p % target.mask.width()))
            .collect();
        let g_sum = support.len() as f64;
        for q in 0..n {
            let probs = &cands.mask_probs[q * hw..(q + 1) * hw];
            let pg: f64 = support.iter().map(|&p| probs[p]).sum();
            let dice_cost = 1.0 - (2.0 * pg + DICE_EPS) / (prob_sums[q] + g_sum + DICE_EPS);
            let b = &cands.boxes[q];
            data[t * n + q] = -w.score * cands.scores[q]
                + w.box_l1 * b.l1(&target.bbox)
                - w.giou * b.giou(&target.bbox)
                + w.dice * dice_cost;
        }
    }
    CostMatrix::new(targets.len(), n, data)
}

// ---------------------------------------------------------------------------
// cross-branch triplets

/// One proposal matched to a query in each branch. `quality` is the weaker
/// of the two box IoUs against the proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triplet {
    pub proposal: usize,
    pub teacher: usize,
    pub student: usize,
    pub quality: f64,
}

/// Matches the proposal set independently against the teacher and student
/// candidates (same cost form both times), joins on the proposal index, and
/// drops triplets whose quality falls below `iou_floor`.
pub fn form_triplets(
    proposal_targets: &[MatchTarget],
    proposal_boxes: &[BBox],
    teacher: &Candidates,
    student: &Candidates,
    w: &CostWeights,
    iou_floor: f64,
) -> Result<Vec<Triplet>, MatchError> {
    if proposal_targets.len() != proposal_boxes.len() {
        return Err(MatchError::Candidates(format!(
            "{} proposal targets but {} proposal boxes",
            proposal_targets.len(),
            proposal_boxes.len()
        )));
    }
    if proposal_targets.is_empty() || teacher.is_empty() || student.is_empty() {
        return Ok(vec![]);
    }
    let t_assign = assign(&build_cost(teacher, proposal_targets, w)?)?;
    let s_assign = assign(&build_cost(student, proposal_targets, w)?)?;

    let mut triplets = Vec::new();
    for &(p, tq) in &t_assign.pairs {
        let Some(sq) = s_assign.col_of(p) else { continue };
        let quality = teacher.boxes[tq]
            .iou(&proposal_boxes[p])
            .min(student.boxes[sq].iou(&proposal_boxes[p]));
        if quality >= iou_floor {
            triplets.push(Triplet { proposal: p, teacher: tq, student: sq, quality });
        }
    }
    Ok(triplets)
}
