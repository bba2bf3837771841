//! Training objectives: focal classification, box regression (L1 + GIoU),
//! prompt-text alignment, supervised contrastive, relation distillation,
//! and the weighted total.
//!
//! Alignment, contrastive, and distillation losses L2-normalize their
//! embedding inputs internally; the classification score path stays
//! unnormalized. The two conventions are deliberate and tested separately.

mod grad;

pub use grad::{
    alignment_loss_with_grad, box_regression_loss_with_grad, focal_loss_with_grad,
    l2_normalize_backward, prompt_to_text_alignment_with_grad,
    relation_distillation_loss_with_grad, supervised_contrastive_loss_with_grad,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::boxes::{giou, BoxSpec};
use crate::embedding::{l2_normalize_array, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Weighting coefficients of the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub lambda_align: f64,
    pub lambda_distill: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 1.0,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            lambda_align: 1.0,
            lambda_distill: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_cls,
            self.lambda_l1,
            self.lambda_giou,
            self.lambda_align,
            self.lambda_distill,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Invalid {
                context: "loss weights",
                requirement: "must be finite and >= 0".into(),
            });
        }
        Ok(())
    }
}

/// Focal loss parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) || !(self.gamma >= 0.0) {
            return Err(Error::Invalid {
                context: "focal params",
                requirement: "alpha in (0,1), gamma >= 0".into(),
            });
        }
        Ok(())
    }
}

/// Teacher/student softmax temperatures of the relation distillation loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperatures {
    pub tau_t: f64,
    pub tau_v: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self {
            tau_t: 0.07,
            tau_v: 0.1,
        }
    }
}

impl Temperatures {
    pub fn validate(&self) -> Result<()> {
        if self.tau_t <= 0.0 || self.tau_v <= 0.0 {
            return Err(Error::Invalid {
                context: "temperatures",
                requirement: "must be > 0".into(),
            });
        }
        Ok(())
    }
}

/// Category text embeddings, one unit-norm row per active category.
#[derive(Debug, Clone)]
pub struct TextMatrix<S: Scalar> {
    values: EmbeddingMatrix<S>,
}

impl<S: Scalar> TextMatrix<S> {
    pub fn new(values: EmbeddingMatrix<S>) -> Result<Self> {
        let tol = S::from_f64(1e-6);
        for (i, row) in values.values().rows().into_iter().enumerate() {
            let norm = row
                .iter()
                .map(|&v| v * v)
                .fold(S::zero(), |a, b| a + b)
                .sqrt();
            if (norm - S::one()).abs() > tol {
                return Err(Error::Invalid {
                    context: "text matrix",
                    requirement: format!("row {i} must be unit norm, got {norm}"),
                });
            }
        }
        Ok(Self { values })
    }

    /// Normalize arbitrary rows into a text matrix.
    pub fn from_unnormalized(values: &EmbeddingMatrix<S>) -> Result<Self> {
        Self::new(crate::embedding::l2_normalize(values)?)
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.dim()
    }

    pub fn matrix(&self) -> &EmbeddingMatrix<S> {
        &self.values
    }
}

pub(crate) const SCORE_EPS: f64 = 1e-8;

/// Focal classification loss over a score/target grid, normalized by the
/// positive count (floor 1). Scores are clamped into `[eps, 1-eps]`.
pub fn focal_classification_loss<S: Scalar>(
    scores: &Array2<S>,
    targets: &Array2<bool>,
    fp: &FocalParams,
) -> Result<S> {
    if scores.dim() != targets.dim() {
        return Err(Error::ShapeMismatch {
            context: "focal loss",
            left: scores.dim(),
            right: targets.dim(),
        });
    }
    fp.validate()?;
    let alpha = S::from_f64(fp.alpha);
    let gamma = S::from_f64(fp.gamma);
    let eps = S::from_f64(SCORE_EPS);
    let one = S::one();

    let mut sum = S::zero();
    let mut n_pos = 0usize;
    for (s, &t) in scores.iter().zip(targets.iter()) {
        let s = (*s).max(eps).min(one - eps);
        if t {
            n_pos += 1;
            sum = sum - alpha * (one - s).powf(gamma) * s.ln();
        } else {
            sum = sum - alpha * s.powf(gamma) * (one - s).ln();
        }
    }
    Ok(sum / S::from_f64(n_pos.max(1) as f64))
}

/// Mean L1 coordinate error and mean `1 - GIoU` over matched box pairs.
pub fn box_regression_loss(pred: &[BoxSpec], gt: &[BoxSpec]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::DimMismatch {
            context: "box regression",
            left: pred.len(),
            right: gt.len(),
        });
    }
    if pred.is_empty() {
        return Ok((0.0, 0.0));
    }
    let n = pred.len() as f64;
    let mut l1 = 0.0;
    let mut giou_loss = 0.0;
    for (p, g) in pred.iter().zip(gt.iter()) {
        l1 += (p.cx - g.cx).abs() + (p.cy - g.cy).abs() + (p.w - g.w).abs() + (p.h - g.h).abs();
        giou_loss += 1.0 - giou(p, g);
    }
    Ok((l1 / (4.0 * n), giou_loss / n))
}

fn softmax_row<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits
        .iter()
        .copied()
        .fold(S::neg_infinity(), |a, b| a.max(b));
    let exps: Vec<S> = logits.iter().map(|&z| (z - max).exp()).collect();
    let denom = exps.iter().copied().fold(S::zero(), |a, b| a + b);
    exps.into_iter().map(|e| e / denom).collect()
}

/// Both directions of the prompt-text InfoNCE: prompt rows classified
/// against text rows, and text rows retrieving their matching prompts.
pub fn alignment_loss_parts<S: Scalar>(
    prompts: &EmbeddingMatrix<S>,
    texts: &TextMatrix<S>,
    labels: &[usize],
    tau: f64,
) -> Result<(S, S)> {
    if labels.len() != prompts.rows() {
        return Err(Error::DimMismatch {
            context: "alignment labels",
            left: labels.len(),
            right: prompts.rows(),
        });
    }
    if prompts.dim() != texts.dim() {
        return Err(Error::DimMismatch {
            context: "alignment",
            left: prompts.dim(),
            right: texts.dim(),
        });
    }
    for &l in labels {
        if l >= texts.rows() {
            return Err(Error::MissingTextRow(l.to_string()));
        }
    }
    let tau = S::from_f64(tau);
    let p = l2_normalize_array(prompts.values())?;
    let t = texts.matrix().values();
    let logits = p.dot(&t.t()).mapv(|v| v / tau); // N x C

    let n = prompts.rows();
    // Prompt -> text direction.
    let mut l_pt = S::zero();
    for i in 0..n {
        let row: Vec<S> = logits.row(i).to_vec();
        let sm = softmax_row(&row);
        l_pt = l_pt - sm[labels[i]].ln();
    }
    l_pt = l_pt / S::from_f64(n as f64);

    // Text -> prompt direction, over text rows with at least one prompt.
    let mut l_tp = S::zero();
    let mut matched_rows = 0usize;
    for c in 0..texts.rows() {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        matched_rows += 1;
        let col: Vec<S> = (0..n).map(|i| logits[[i, c]]).collect();
        let sm = softmax_row(&col);
        let mut term = S::zero();
        for &k in &members {
            term = term - sm[k].ln();
        }
        l_tp = l_tp + term / S::from_f64(members.len() as f64);
    }
    l_tp = l_tp / S::from_f64(matched_rows as f64);

    Ok((l_pt, l_tp))
}

/// Symmetric InfoNCE between prompt rows and their category text rows:
/// the mean of both directions of [`alignment_loss_parts`].
///
/// `labels[i]` is the text-row index for prompt `i`. Prompts are normalized
/// internally; the text matrix already carries unit rows.
pub fn alignment_loss<S: Scalar>(
    prompts: &EmbeddingMatrix<S>,
    texts: &TextMatrix<S>,
    labels: &[usize],
    tau: f64,
) -> Result<S> {
    let (l_pt, l_tp) = alignment_loss_parts(prompts, texts, labels, tau)?;
    Ok((l_pt + l_tp) / S::from_f64(2.0))
}

/// The prompt-to-text direction alone: cross-entropy against fixed text
/// anchors. Bounded by the text geometry, unlike the text-to-prompt
/// direction whose in-batch prompt negatives repel prompt pairs without
/// bound.
pub fn prompt_to_text_alignment_loss<S: Scalar>(
    prompts: &EmbeddingMatrix<S>,
    texts: &TextMatrix<S>,
    labels: &[usize],
    tau: f64,
) -> Result<S> {
    Ok(alignment_loss_parts(prompts, texts, labels, tau)?.0)
}

/// Outcome of the supervised contrastive loss; `all_unique` is raised when
/// no anchor had a positive partner, in which case the value is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SclOutcome<S> {
    pub value: S,
    pub all_unique: bool,
}

/// Supervised contrastive loss over prompt rows. Anchors sum over their
/// same-label positives; the denominator runs over all other prompts. The
/// anchor itself is excluded from both. Prompts normalize internally.
pub fn supervised_contrastive_loss<S: Scalar, L: PartialEq>(
    prompts: &EmbeddingMatrix<S>,
    labels: &[L],
    tau: f64,
) -> Result<SclOutcome<S>> {
    if labels.len() != prompts.rows() {
        return Err(Error::DimMismatch {
            context: "scl labels",
            left: labels.len(),
            right: prompts.rows(),
        });
    }
    let tau = S::from_f64(tau);
    let p = l2_normalize_array(prompts.values())?;
    let sims = p.dot(&p.t());
    let n = prompts.rows();

    let mut total = S::zero();
    let mut any_positive = false;
    for i in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&j| j != i && labels[j] == labels[i])
            .collect();
        if positives.is_empty() {
            continue;
        }
        any_positive = true;
        let others: Vec<usize> = (0..n).filter(|&k| k != i).collect();
        let logits: Vec<S> = others.iter().map(|&k| sims[[i, k]] / tau).collect();
        let sm = softmax_row(&logits);
        let mut anchor = S::zero();
        for &j in &positives {
            let pos_idx = others.iter().position(|&k| k == j).unwrap();
            anchor = anchor - sm[pos_idx].ln();
        }
        total = total + anchor / S::from_f64(positives.len() as f64);
    }
    Ok(SclOutcome {
        value: total,
        all_unique: !any_positive,
    })
}

/// Relation distillation: row-wise cross-entropy from the text similarity
/// softmax (teacher) onto the prompt similarity softmax (student). The
/// diagonal stays in the sum. Both inputs normalize internally.
pub fn relation_distillation_loss<S: Scalar>(
    prompts: &EmbeddingMatrix<S>,
    texts: &TextMatrix<S>,
    temps: &Temperatures,
) -> Result<S> {
    temps.validate()?;
    let n = prompts.rows();
    if texts.rows() != n {
        return Err(Error::DimMismatch {
            context: "distillation rows",
            left: n,
            right: texts.rows(),
        });
    }
    if n < 2 {
        return Err(Error::Invalid {
            context: "distillation",
            requirement: format!("needs at least 2 rows, got {n}"),
        });
    }
    let p = l2_normalize_array(prompts.values())?;
    let c = l2_normalize_array(texts.matrix().values())?;
    let tau_v = S::from_f64(temps.tau_v);
    let tau_t = S::from_f64(temps.tau_t);

    let student_logits = p.dot(&p.t()).mapv(|v| v / tau_v);
    let teacher_logits = c.dot(&c.t()).mapv(|v| v / tau_t);

    let mut total = S::zero();
    for i in 0..n {
        let teacher = softmax_row(&teacher_logits.row(i).to_vec());
        let student = softmax_row(&student_logits.row(i).to_vec());
        for j in 0..n {
            total = total - teacher[j] * student[j].ln();
        }
    }
    Ok(total / S::from_f64(n as f64))
}

/// Mean row entropy of the teacher distribution, the lower bound of the
/// distillation cross-entropy.
pub fn teacher_mean_row_entropy<S: Scalar>(texts: &TextMatrix<S>, tau_t: f64) -> Result<S> {
    let n = texts.rows();
    if n < 2 {
        return Err(Error::Invalid {
            context: "teacher entropy",
            requirement: "needs at least 2 rows".into(),
        });
    }
    let c = l2_normalize_array(texts.matrix().values())?;
    let tau = S::from_f64(tau_t);
    let logits = c.dot(&c.t()).mapv(|v| v / tau);
    let mut total = S::zero();
    for i in 0..n {
        let row = softmax_row(&logits.row(i).to_vec());
        for &q in &row {
            total = total - q * q.ln();
        }
    }
    Ok(total / S::from_f64(n as f64))
}

/// Named loss parts entering the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub align: f64,
    pub distill: f64,
}

/// Weighted total loss. Rejects NaN parts by name.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    let named = [
        ("cls", parts.cls),
        ("l1", parts.l1),
        ("giou", parts.giou),
        ("align", parts.align),
        ("distill", parts.distill),
    ];
    for (name, v) in named {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss part {name}")));
        }
    }
    Ok(w.lambda_cls * parts.cls
        + w.lambda_l1 * parts.l1
        + w.lambda_giou * parts.giou
        + w.lambda_align * parts.align
        + w.lambda_distill * parts.distill)
}

pub use crate::boxes::giou as giou_loss_term;
