//! Embedding algebra: normalization, cosine similarity, and prompt-based
//! classification scores.
//!
//! Scoring follows the prompt-based convention `Score = sigmoid(O P^T + b)`
//! where neither side is L2-normalized, so dot products span the whole real
//! line. Normalization is reserved for the alignment/distillation paths and
//! for cosine similarity.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};

/// Dense N x D matrix of embeddings, one row per item. All entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix<S: Scalar> {
    values: Array2<S>,
}

impl<S: Scalar> EmbeddingMatrix<S> {
    pub fn new(values: Array2<S>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding matrix".into()));
        }
        Ok(Self { values })
    }

    /// Build from rows; all rows must share one dimension.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("embedding rows"));
        }
        let dim = rows[0].len();
        let mut values = Array2::zeros((rows.len(), dim));
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::DimMismatch {
                    context: "embedding rows",
                    left: dim,
                    right: row.len(),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                values[[i, j]] = v;
            }
        }
        Self::new(values)
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<S> {
        &self.values
    }

    pub fn into_values(self) -> Array2<S> {
        self.values
    }

    pub fn row(&self, i: usize) -> Array1<S> {
        self.values.row(i).to_owned()
    }
}

/// Sigmoid scores, one row per proposal and one column per prompt.
/// Every entry lies strictly inside (0, 1).
#[derive(Debug, Clone)]
pub struct ScoreMatrix<S: Scalar> {
    values: Array2<S>,
}

impl<S: Scalar> ScoreMatrix<S> {
    pub fn new(values: Array2<S>) -> Result<Self> {
        if values
            .iter()
            .any(|v| !v.is_finite() || *v <= S::zero() || *v >= S::one())
        {
            return Err(Error::Invalid {
                context: "score matrix",
                requirement: "entries must lie strictly inside (0, 1)".into(),
            });
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<S> {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.values.nrows(), self.values.ncols())
    }
}

/// Learnable scalar bias of the scoring head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarBias<S: Scalar>(pub S);

impl<S: Scalar> ScalarBias<S> {
    pub fn new(b: S) -> Result<Self> {
        if !b.is_finite() {
            return Err(Error::NonFinite("scalar bias".into()));
        }
        Ok(Self(b))
    }
}

fn row_norms<S: Scalar>(m: &Array2<S>) -> Vec<S> {
    m.rows()
        .into_iter()
        .map(|r| r.iter().map(|&v| v * v).fold(S::zero(), |a, b| a + b).sqrt())
        .collect()
}

/// Scale every row to unit Euclidean norm. Zero rows are an error, never a
/// silent zero: a zeroed row would corrupt every similarity built on top.
pub fn l2_normalize<S: Scalar>(m: &EmbeddingMatrix<S>) -> Result<EmbeddingMatrix<S>> {
    let normalized = l2_normalize_array(m.values())?;
    EmbeddingMatrix::new(normalized)
}

/// Array-level variant of [`l2_normalize`] for internal callers.
pub fn l2_normalize_array<S: Scalar>(m: &Array2<S>) -> Result<Array2<S>> {
    let norms = row_norms(m);
    let mut out = m.clone();
    for (i, norm) in norms.iter().enumerate() {
        if *norm <= S::zero() {
            return Err(Error::ZeroNormRow(i));
        }
        let mut row = out.row_mut(i);
        row.mapv_inplace(|v| v / *norm);
    }
    Ok(out)
}

/// Pairwise cosine similarity: entry (i, j) = <A_i, B_j> / (|A_i| |B_j|).
/// Entries are clamped into [-1, 1] against floating-point overshoot.
pub fn cosine_similarity_matrix<S: Scalar>(
    a: &EmbeddingMatrix<S>,
    b: &EmbeddingMatrix<S>,
) -> Result<Array2<S>> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            context: "cosine similarity",
            left: a.dim(),
            right: b.dim(),
        });
    }
    let an = l2_normalize_array(a.values())?;
    let bn = l2_normalize_array(b.values())?;
    let mut sims = an.dot(&bn.t());
    sims.mapv_inplace(|v| v.max(-S::one()).min(S::one()));
    Ok(sims)
}

/// Prompt-based classification score: `sigmoid(O P^T + b)`.
/// Inputs are deliberately unnormalized so logits span the real line.
pub fn prompt_score<S: Scalar>(
    proposals: &EmbeddingMatrix<S>,
    prompts: &EmbeddingMatrix<S>,
    bias: ScalarBias<S>,
) -> Result<ScoreMatrix<S>> {
    if proposals.dim() != prompts.dim() {
        return Err(Error::DimMismatch {
            context: "prompt score",
            left: proposals.dim(),
            right: prompts.dim(),
        });
    }
    let mut logits = proposals.values().dot(&prompts.values().t());
    logits.mapv_inplace(|v| sigmoid(v + bias.0));
    ScoreMatrix::new(logits)
}
