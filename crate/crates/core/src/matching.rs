//! Bipartite matching between decoder slots and oracle-derived targets, and
//! the auxiliary set loss built on it.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::gridnav::{Action, OraclePlan, NUM_CLASSES};
use crate::ndgrad::{GradError, Tape, Tensor, Var};

/// Tolerance on probability-vector normalization.
const PROB_TOL: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum MatchError {
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("dimension error: {0}")]
    Shape(String),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// One ground-truth target: an optimal first action with its modality
/// weights `(audio, visual)`, or the no-object padding item.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthItem {
    pub class: Option<Action>,
    pub modality: Option<[f64; 2]>,
}

impl GroundTruthItem {
    pub const NULL: Self = Self {
        class: None,
        modality: None,
    };

    pub fn is_null(&self) -> bool {
        self.class.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Slot index assigned to each ground-truth item.
    pub assignment: Vec<usize>,
    pub cost: f64,
}

/// Per-batch matching summary for the training log.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchDiagnostics {
    /// Mean total matched cost per ground-truth set.
    pub mean_cost: f64,
    /// Fraction of slots matched to padding items.
    pub null_fraction: f64,
}

/// Audio-leaning weights for far targets, visual-leaning for near ones:
/// `w_aud = min(1, d / d_max)`.
pub fn modality_target(distance: f64, d_max: f64) -> [f64; 2] {
    let w_aud = (distance / d_max.max(f64::MIN_POSITIVE)).clamp(0.0, 1.0);
    [w_aud, 1.0 - w_aud]
}

/// One item per optimal first action, padded with no-object items to `n_t`.
///
/// The distance is measured to the success region, `max(0, geodesic − radius)`.
pub fn build_gt_set(plan: &OraclePlan, radius: u32, d_max: f64, n_t: usize) -> Vec<GroundTruthItem> {
    let distance = f64::from(plan.geodesic.saturating_sub(radius));
    let modality = modality_target(distance, d_max);
    if plan.actions.len() > n_t {
        log::warn!(
            "{} optimal actions exceed {n_t} target slots; keeping the first {n_t}",
            plan.actions.len()
        );
    }
    let mut items: Vec<GroundTruthItem> = plan
        .actions
        .iter()
        .take(n_t)
        .map(|&a| GroundTruthItem {
            class: Some(a),
            modality: Some(modality),
        })
        .collect();
    items.resize(n_t, GroundTruthItem::NULL);
    items
}

fn check_probs(probs: &[f64]) -> Result<(), MatchError> {
    let total: f64 = probs.iter().sum();
    if probs.len() != NUM_CLASSES {
        return Err(MatchError::Shape(format!(
            "class probabilities have {} entries, expected {NUM_CLASSES}",
            probs.len()
        )));
    }
    if !total.is_finite() || (total - 1.0).abs() > PROB_TOL || probs.iter().any(|&p| p < 0.0) {
        return Err(MatchError::Numeric(format!(
            "class probabilities are not normalized (sum {total})"
        )));
    }
    Ok(())
}

/// Mean absolute difference between modality vectors.
fn l1(a: &[f64; 2], b: &[f64]) -> f64 {
    ((a[0] - b[0]).abs() + (a[1] - b[1]).abs()) / 2.0
}

/// `−p̂(c) + L1(a, â)` for a real item, zero for padding.
pub fn pair_cost(item: &GroundTruthItem, probs: &[f64], modality: &[f64]) -> Result<f64, MatchError> {
    check_probs(probs)?;
    if modality.len() != 2 {
        return Err(MatchError::Shape(format!(
            "modality vector has {} entries, expected 2",
            modality.len()
        )));
    }
    match (item.class, item.modality) {
        (Some(c), Some(a)) => Ok(l1(&a, modality) - probs[c.index()]),
        _ => Ok(0.0),
    }
}

/// Cost matrix `[gt, slot]` for one set, row-major.
pub fn cost_matrix(
    items: &[GroundTruthItem],
    class_probs: &[f64],
    modality: &[f64],
) -> Result<Vec<f64>, MatchError> {
    let n = items.len();
    if class_probs.len() != n * NUM_CLASSES || modality.len() != n * 2 {
        return Err(MatchError::Shape(format!(
            "{n} ground-truth items against {} class rows and {} modality rows",
            class_probs.len() / NUM_CLASSES,
            modality.len() / 2
        )));
    }
    let mut cost = Vec::with_capacity(n * n);
    for item in items {
        for j in 0..n {
            cost.push(pair_cost(
                item,
                &class_probs[j * NUM_CLASSES..(j + 1) * NUM_CLASSES],
                &modality[j * 2..j * 2 + 2],
            )?);
        }
    }
    Ok(cost)
}

/// Minimum-cost assignment on a square row-major matrix (Kuhn–Munkres with
/// potentials). Among optimal assignments the lexicographically smallest
/// slot sequence is returned.
pub fn hungarian(cost: &[f64], n: usize) -> Result<MatchResult, MatchError> {
    if n == 0 || cost.len() != n * n {
        return Err(MatchError::Shape(format!(
            "cost matrix has {} entries, expected {n}x{n}",
            cost.len()
        )));
    }
    if let Some(bad) = cost.iter().find(|c| !c.is_finite()) {
        return Err(MatchError::Numeric(format!("non-finite cost {bad}")));
    }
    let a = |i: usize, j: usize| cost[i * n + j];

    // 1-based shortest augmenting paths; column 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let scale = cost.iter().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-10 * scale * n as f64;
    let tight: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| a(i, j) - u[i + 1] - v[j + 1] <= tol).collect())
        .collect();
    let mut row_col = vec![0usize; n];
    let mut col_row = vec![0usize; n];
    for j in 1..=n {
        row_col[owner[j] - 1] = j - 1;
        col_row[j - 1] = owner[j] - 1;
    }
    lexicographic_min(&tight, &mut row_col, &mut col_row);

    let total = (0..n).map(|i| a(i, row_col[i])).sum();
    Ok(MatchResult {
        assignment: row_col,
        cost: total,
    })
}

/// Rewrites a perfect matching of the tight graph into its lexicographically
/// smallest one, fixing rows in order.
fn lexicographic_min(tight: &[Vec<bool>], row_col: &mut [usize], col_row: &mut [usize]) {
    let n = row_col.len();
    for i in 0..n {
        for j in 0..n {
            if !tight[i][j] || col_row[j] < i {
                continue;
            }
            if row_col[i] == j {
                break;
            }
            let freed = row_col[i];
            let displaced = col_row[j];
            let (saved_rc, saved_cr) = (row_col.to_vec(), col_row.to_vec());
            row_col[i] = j;
            col_row[j] = i;
            let mut seen = vec![false; n];
            for c in 0..n {
                seen[c] = c != freed && col_row[c] <= i;
            }
            if augment(tight, displaced, freed, &mut seen, row_col, col_row) {
                break;
            }
            row_col.copy_from_slice(&saved_rc);
            col_row.copy_from_slice(&saved_cr);
        }
    }
}

/// Finds an alternating path from `row` to the free column `target`.
fn augment(
    tight: &[Vec<bool>],
    row: usize,
    target: usize,
    seen: &mut [bool],
    row_col: &mut [usize],
    col_row: &mut [usize],
) -> bool {
    for c in 0..row_col.len() {
        if !tight[row][c] || seen[c] {
            continue;
        }
        seen[c] = true;
        if c == target || augment(tight, col_row[c], target, seen, row_col, col_row) {
            row_col[row] = c;
            col_row[c] = row;
            return true;
        }
    }
    false
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Optimal assignment computed with items and slots sorted by value, so the
/// chosen pairs do not depend on either input order. Exact cost ties are
/// common (modality targets share a simplex), and different tied matchings
/// round differently when summed.
pub fn canonical_match(
    items: &[GroundTruthItem],
    class_probs: &[f64],
    modality: &[f64],
) -> Result<MatchResult, MatchError> {
    let n = items.len();
    let key = |g: &GroundTruthItem| match (g.class, g.modality) {
        (Some(c), Some(a)) => [c.index() as f64, a[0], a[1]],
        _ => [f64::INFINITY; 3],
    };
    let mut gt_order: Vec<usize> = (0..n).collect();
    gt_order.sort_by(|&x, &y| lex_cmp(&key(&items[x]), &key(&items[y])));
    let slot_key = |j: usize| {
        let mut k = class_probs[j * NUM_CLASSES..(j + 1) * NUM_CLASSES].to_vec();
        k.extend_from_slice(&modality[j * 2..j * 2 + 2]);
        k
    };
    let mut slot_order: Vec<usize> = (0..n).collect();
    slot_order.sort_by(|&x, &y| lex_cmp(&slot_key(x), &slot_key(y)));

    let sorted_items: Vec<GroundTruthItem> = gt_order.iter().map(|&i| items[i]).collect();
    let mut probs = Vec::with_capacity(class_probs.len());
    let mut modal = Vec::with_capacity(modality.len());
    for &j in &slot_order {
        probs.extend_from_slice(&class_probs[j * NUM_CLASSES..(j + 1) * NUM_CLASSES]);
        modal.extend_from_slice(&modality[j * 2..j * 2 + 2]);
    }
    let cost = cost_matrix(&sorted_items, &probs, &modal)?;
    let m = hungarian(&cost, n)?;
    let mut assignment = vec![0; n];
    for (r, &i) in gt_order.iter().enumerate() {
        assignment[i] = slot_order[m.assignment[r]];
    }
    Ok(MatchResult {
        assignment,
        cost: m.cost,
    })
}

/// Differentiable matching loss for a batch of ground-truth sets.
///
/// `class_probs` is `[B·N, NUM_CLASSES]` and `modality` is `[B·N, 2]`, with
/// the `N` slots of each set contiguous. Assignments are computed on detached
/// values; the matched terms are summed in ascending order of value so the
/// result does not depend on slot or item order. The loss is the mean over
/// sets of the summed matched costs.
pub fn matching_loss(
    tape: &mut Tape<'_>,
    sets: &[Vec<GroundTruthItem>],
    class_probs: Var,
    modality: Var,
) -> Result<(Var, MatchDiagnostics), MatchError> {
    let b = sets.len();
    let n = sets.first().map_or(0, Vec::len);
    if b == 0 || n == 0 || sets.iter().any(|s| s.len() != n) {
        return Err(MatchError::Shape("ground-truth sets must be non-empty and equal-sized".into()));
    }
    if tape.shape(class_probs) != [b * n, NUM_CLASSES] || tape.shape(modality) != [b * n, 2] {
        return Err(MatchError::Shape(format!(
            "{b} sets of {n} items against class probabilities {:?} and modality {:?}",
            tape.shape(class_probs),
            tape.shape(modality)
        )));
    }

    let mut prob_idx = Vec::new();
    let mut mod_idx = Vec::new();
    let mut targets = Vec::new();
    let mut total_cost = 0.0;
    let mut nulls = 0usize;
    for (s, items) in sets.iter().enumerate() {
        let rows = s * n..(s + 1) * n;
        let probs = &tape.value(class_probs).data()[rows.start * NUM_CLASSES..rows.end * NUM_CLASSES];
        let modal = &tape.value(modality).data()[rows.start * 2..rows.end * 2];
        let m = canonical_match(items, probs, modal)?;
        total_cost += m.cost;
        for (item, &slot) in items.iter().zip(&m.assignment) {
            match (item.class, item.modality) {
                (Some(c), Some(a)) => {
                    let row = rows.start + slot;
                    prob_idx.push(row * NUM_CLASSES + c.index());
                    mod_idx.extend([row * 2, row * 2 + 1]);
                    targets.extend(a);
                }
                _ => nulls += 1,
            }
        }
    }
    let diagnostics = MatchDiagnostics {
        mean_cost: total_cost / b as f64,
        null_fraction: nulls as f64 / (b * n) as f64,
    };
    if prob_idx.is_empty() {
        return Ok((tape.constant(Tensor::scalar(0.0)), diagnostics));
    }

    let k = prob_idx.len();
    let p = tape.pick(class_probs, &prob_idx)?;
    let a_hat = tape.pick(modality, &mod_idx)?;
    let target = tape.constant(Tensor::vector(targets));
    let diff = tape.sub(a_hat, target)?;
    let diff = tape.abs(diff)?;
    let diff = tape.reshape(diff, &[k, 2])?;
    let half = tape.constant(Tensor::new(vec![2, 1], vec![0.5, 0.5])?);
    let attn = tape.matmul(diff, half)?;
    let attn = tape.reshape(attn, &[k])?;
    let terms = tape.sub(attn, p)?;
    let mut order: Vec<usize> = (0..k).collect();
    let values = tape.value(terms).data();
    order.sort_by(|&x, &y| values[x].total_cmp(&values[y]));
    let sorted = tape.pick(terms, &order)?;
    let sum = tape.sum(sorted)?;
    Ok((tape.scale(sum, 1.0 / b as f64)?, diagnostics))
}

#[cfg(test)]
mod tests;
