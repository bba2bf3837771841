//! Minimum-cost bipartite assignment (shortest augmenting path with
//! potentials) and the detection matching cost built on it.

use ndarray::Array2;

use crate::boxes::{giou, BoxSpec};
use crate::losses::{FocalParams, LossWeights};

/// One-to-one assignment: `pairs[i] = (row, col)`; rows and columns not
/// listed are unmatched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn matched_row(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|(r, _)| *r == row).map(|(_, c)| *c)
    }

    pub fn total_cost(&self, cost: &Array2<f64>) -> f64 {
        self.pairs.iter().map(|&(r, c)| cost[[r, c]]).sum()
    }
}

/// Minimum-cost assignment of a rectangular cost matrix; matches
/// `min(rows, cols)` pairs. Pairs are reported sorted by row.
pub fn assign_min_cost(cost: &Array2<f64>) -> Assignment {
    let (rows, cols) = cost.dim();
    if rows == 0 || cols == 0 {
        return Assignment { pairs: vec![] };
    }
    let transposed = rows > cols;
    let work = if transposed {
        cost.t().to_owned()
    } else {
        cost.clone()
    };
    let (n, m) = work.dim();

    // Potentials-based shortest augmenting path, 1-indexed scratch arrays.
    let mut u = vec![0.0_f64; n + 1];
    let mut v = vec![0.0_f64; m + 1];
    let mut matched_row = vec![0usize; m + 1]; // column -> row (1-based)
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = work[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| matched_row[j] != 0)
        .map(|j| {
            if transposed {
                (j - 1, matched_row[j] - 1)
            } else {
                (matched_row[j] - 1, j - 1)
            }
        })
        .collect();
    pairs.sort_unstable();
    Assignment { pairs }
}

/// A query's raw prediction entering the matcher: its box and its score for
/// every bank category.
#[derive(Debug, Clone)]
pub struct QueryPrediction {
    pub bbox: BoxSpec,
    pub scores: Vec<f64>,
}

/// Matching cost of one (prediction, ground-truth) pair: the focal-style
/// classification cost on the ground truth's category score plus weighted
/// L1 and GIoU box costs.
pub fn pair_cost(
    pred: &QueryPrediction,
    gt_box: &BoxSpec,
    gt_class: usize,
    w: &LossWeights,
    fp: &FocalParams,
) -> f64 {
    let s = pred.scores[gt_class].clamp(1e-8, 1.0 - 1e-8);
    let pos = fp.alpha * (1.0 - s).powf(fp.gamma) * (-s.ln());
    let neg = fp.alpha * s.powf(fp.gamma) * (-(1.0 - s).ln());
    let cls = pos - neg;
    let l1 = ((pred.bbox.cx - gt_box.cx).abs()
        + (pred.bbox.cy - gt_box.cy).abs()
        + (pred.bbox.w - gt_box.w).abs()
        + (pred.bbox.h - gt_box.h).abs())
        / 4.0;
    let giou_cost = 1.0 - giou(&pred.bbox, gt_box);
    w.lambda_cls * cls + w.lambda_l1 * l1 + w.lambda_giou * giou_cost
}

/// DETR-style matching: minimum-cost one-to-one assignment of predictions
/// to ground truths. Unmatched predictions are negatives. `gt_class` values
/// index into each prediction's score vector.
pub fn hungarian_match(
    predictions: &[QueryPrediction],
    gts: &[(BoxSpec, usize)],
    w: &LossWeights,
    fp: &FocalParams,
) -> Assignment {
    if predictions.is_empty() || gts.is_empty() {
        return Assignment { pairs: vec![] };
    }
    let cost = Array2::from_shape_fn((predictions.len(), gts.len()), |(i, j)| {
        pair_cost(&predictions[i], &gts[j].0, gts[j].1, w, fp)
    });
    assign_min_cost(&cost)
}
