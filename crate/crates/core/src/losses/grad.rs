//! Analytic gradients of the loss suite, used by the training step and
//! verified against central finite differences.
//!
//! All gradient paths are `f64`. Losses that normalize their embedding
//! inputs internally return gradients with respect to the *raw* inputs,
//! i.e. the normalization Jacobian is included.

use ndarray::{Array1, Array2};

use crate::boxes::{giou_with_grad, BoxSpec};
use crate::embedding::{l2_normalize_array, EmbeddingMatrix};
use crate::error::Result;
use crate::losses::{
    alignment_loss, box_regression_loss, focal_classification_loss, relation_distillation_loss,
    supervised_contrastive_loss, FocalParams, Temperatures, TextMatrix, SCORE_EPS,
};

/// Backward of row-wise L2 normalization: maps dL/d(normalized) to dL/d(raw).
pub fn l2_normalize_backward(raw: &Array2<f64>, grad_normalized: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(raw.dim());
    for i in 0..raw.nrows() {
        let row = raw.row(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let unit: Array1<f64> = row.to_owned() / norm;
        let g = grad_normalized.row(i);
        let radial: f64 = g.iter().zip(unit.iter()).map(|(a, b)| a * b).sum();
        for j in 0..raw.ncols() {
            out[[i, j]] = (g[j] - radial * unit[j]) / norm;
        }
    }
    out
}

fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

/// Focal loss value plus gradient with respect to the scores.
pub fn focal_loss_with_grad(
    scores: &Array2<f64>,
    targets: &Array2<bool>,
    fp: &FocalParams,
) -> Result<(f64, Array2<f64>)> {
    let value = focal_classification_loss(scores, targets, fp)?;
    let n_pos = targets.iter().filter(|&&t| t).count().max(1) as f64;
    let (alpha, gamma) = (fp.alpha, fp.gamma);
    let mut grad = Array2::zeros(scores.dim());
    for ((idx, &s_raw), &t) in scores.indexed_iter().zip(targets.iter()) {
        if s_raw <= SCORE_EPS || s_raw >= 1.0 - SCORE_EPS {
            continue; // clamp region: flat
        }
        let s = s_raw;
        let g = if t {
            // d/ds of -alpha (1-s)^gamma ln s
            let focal = (1.0 - s).powf(gamma);
            let dfocal = if gamma == 0.0 {
                0.0
            } else {
                -gamma * (1.0 - s).powf(gamma - 1.0)
            };
            -alpha * (dfocal * s.ln() + focal / s)
        } else {
            // d/ds of -alpha s^gamma ln(1-s)
            let focal = s.powf(gamma);
            let dfocal = if gamma == 0.0 {
                0.0
            } else {
                gamma * s.powf(gamma - 1.0)
            };
            -alpha * (dfocal * (1.0 - s).ln() - focal / (1.0 - s))
        };
        grad[idx] = g / n_pos;
    }
    Ok((value, grad))
}

/// Box regression losses plus per-box gradients in (cx, cy, w, h).
/// Returns `(l1, giou_loss, l1_grads, giou_grads)`.
pub type BoxGrads = Vec<[f64; 4]>;

pub fn box_regression_loss_with_grad(
    pred: &[BoxSpec],
    gt: &[BoxSpec],
) -> Result<(f64, f64, BoxGrads, BoxGrads)> {
    let (l1, giou_loss) = box_regression_loss(pred, gt)?;
    let n = pred.len() as f64;
    let mut l1_grads = Vec::with_capacity(pred.len());
    let mut giou_grads = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt.iter()) {
        let sign = |d: f64| {
            if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            }
        };
        l1_grads.push([
            sign(p.cx - g.cx) / (4.0 * n),
            sign(p.cy - g.cy) / (4.0 * n),
            sign(p.w - g.w) / (4.0 * n),
            sign(p.h - g.h) / (4.0 * n),
        ]);
        let (_, ggrad) = giou_with_grad(p, g);
        giou_grads.push([
            -ggrad[0] / n,
            -ggrad[1] / n,
            -ggrad[2] / n,
            -ggrad[3] / n,
        ]);
    }
    Ok((l1, giou_loss, l1_grads, giou_grads))
}

/// Prompt-to-text alignment value plus gradient with respect to the raw
/// prompts (the direction used by the training step).
pub fn prompt_to_text_alignment_with_grad(
    prompts: &Array2<f64>,
    texts: &TextMatrix<f64>,
    labels: &[usize],
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    let pm = EmbeddingMatrix::new(prompts.clone())?;
    let value = crate::losses::prompt_to_text_alignment_loss(&pm, texts, labels, tau)?;

    let p_hat = l2_normalize_array(prompts)?;
    let t = texts.matrix().values();
    let n = prompts.nrows();
    let c_rows = texts.rows();
    let logits = p_hat.dot(&t.t()).mapv(|v| v / tau);
    let mut coeff = Array2::<f64>::zeros((n, c_rows));
    for i in 0..n {
        let sm = softmax_f64(&logits.row(i).to_vec());
        for c in 0..c_rows {
            let indicator = if labels[i] == c { 1.0 } else { 0.0 };
            coeff[[i, c]] += (sm[c] - indicator) / (n as f64 * tau);
        }
    }
    let grad_hat = coeff.dot(t);
    Ok((value, l2_normalize_backward(prompts, &grad_hat)))
}

/// Alignment loss value plus gradient with respect to the raw prompts.
pub fn alignment_loss_with_grad(
    prompts: &Array2<f64>,
    texts: &TextMatrix<f64>,
    labels: &[usize],
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    let pm = EmbeddingMatrix::new(prompts.clone())?;
    let value = alignment_loss(&pm, texts, labels, tau)?;

    let p_hat = l2_normalize_array(prompts)?;
    let t = texts.matrix().values();
    let n = prompts.nrows();
    let c_rows = texts.rows();
    let logits = p_hat.dot(&t.t()).mapv(|v| v / tau);

    // Coefficient matrix over (prompt, text) pairs; grad_hat = coeff . t.
    let mut coeff = Array2::<f64>::zeros((n, c_rows));

    // Prompt -> text direction.
    for i in 0..n {
        let sm = softmax_f64(&logits.row(i).to_vec());
        for c in 0..c_rows {
            let indicator = if labels[i] == c { 1.0 } else { 0.0 };
            coeff[[i, c]] += (sm[c] - indicator) / (n as f64 * tau);
        }
    }

    // Text -> prompt direction.
    let matched: Vec<usize> = (0..c_rows)
        .filter(|&c| labels.iter().any(|&l| l == c))
        .collect();
    let m = matched.len() as f64;
    for &c in &matched {
        let col: Vec<f64> = (0..n).map(|i| logits[[i, c]]).collect();
        let sm = softmax_f64(&col);
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        let k = members.len() as f64;
        for i in 0..n {
            let indicator = if labels[i] == c { 1.0 / k } else { 0.0 };
            coeff[[i, c]] += (sm[i] - indicator) / (m * tau);
        }
    }

    let grad_hat = coeff.dot(t) / 2.0;
    Ok((value, l2_normalize_backward(prompts, &grad_hat)))
}

/// Supervised contrastive loss value plus gradient with respect to the raw
/// prompts. The boolean mirrors the all-labels-unique warning flag.
pub fn supervised_contrastive_loss_with_grad<L: PartialEq>(
    prompts: &Array2<f64>,
    labels: &[L],
    tau: f64,
) -> Result<(f64, Array2<f64>, bool)> {
    let pm = EmbeddingMatrix::new(prompts.clone())?;
    let outcome = supervised_contrastive_loss(&pm, labels, tau)?;

    let n = prompts.nrows();
    let p_hat = l2_normalize_array(prompts)?;
    let sims = p_hat.dot(&p_hat.t());
    let mut coeff = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&j| j != i && labels[j] == labels[i])
            .collect();
        if positives.is_empty() {
            continue;
        }
        let others: Vec<usize> = (0..n).filter(|&k| k != i).collect();
        let logits: Vec<f64> = others.iter().map(|&k| sims[[i, k]] / tau).collect();
        let sm = softmax_f64(&logits);
        for (slot, &k) in others.iter().enumerate() {
            let indicator = if positives.contains(&k) {
                1.0 / positives.len() as f64
            } else {
                0.0
            };
            coeff[[i, k]] += (sm[slot] - indicator) / tau;
        }
    }
    let grad_hat = (&coeff + &coeff.t()).dot(&p_hat);
    Ok((
        outcome.value,
        l2_normalize_backward(prompts, &grad_hat),
        outcome.all_unique,
    ))
}

/// Relation distillation loss value plus gradient with respect to the raw
/// prompts (the student side). The teacher side is constant.
pub fn relation_distillation_loss_with_grad(
    prompts: &Array2<f64>,
    texts: &TextMatrix<f64>,
    temps: &Temperatures,
) -> Result<(f64, Array2<f64>)> {
    let pm = EmbeddingMatrix::new(prompts.clone())?;
    let value = relation_distillation_loss(&pm, texts, temps)?;

    let n = prompts.nrows();
    let p_hat = l2_normalize_array(prompts)?;
    let c_hat = l2_normalize_array(texts.matrix().values())?;
    let student_logits = p_hat.dot(&p_hat.t()).mapv(|v| v / temps.tau_v);
    let teacher_logits = c_hat.dot(&c_hat.t()).mapv(|v| v / temps.tau_t);

    let mut diff = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let student = softmax_f64(&student_logits.row(i).to_vec());
        let teacher = softmax_f64(&teacher_logits.row(i).to_vec());
        for j in 0..n {
            diff[[i, j]] = (student[j] - teacher[j]) / (n as f64 * temps.tau_v);
        }
    }
    let grad_hat = (&diff + &diff.t()).dot(&p_hat);
    Ok((value, l2_normalize_backward(prompts, &grad_hat)))
}
