//! Selective prompt-image fusion. An auxiliary scoring branch decides which
//! prompt categories are present; absent prompts are masked out of the
//! prompt-to-image attention and frozen in the image-to-prompt direction.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{prompt_score, EmbeddingMatrix, ScalarBias, ScoreMatrix};
use crate::error::{Error, Result};
use crate::layers::Attention;
use crate::nn::{Fwd, ParamGroup, ParamId, ParamStore, Var};
use crate::prompt::FeatureGrid;
use crate::scalar::Scalar;

/// Additive logit mask standing in for minus infinity; softmax of a logit
/// this far down underflows to exactly zero in f64.
pub const GATE_SENTINEL: f64 = -1e9;

/// Per-prompt additive attention bias: 0 for present categories, the
/// sentinel for absent ones.
#[derive(Debug, Clone, PartialEq)]
pub struct GateVector {
    values: Vec<f64>,
}

impl GateVector {
    pub fn from_open_flags(open: &[bool]) -> Self {
        Self {
            values: open
                .iter()
                .map(|&o| if o { 0.0 } else { GATE_SENTINEL })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_open(&self, i: usize) -> bool {
        self.values[i] == 0.0
    }

    pub fn all_closed(&self) -> bool {
        self.values.iter().all(|&v| v != 0.0)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn as_row(&self) -> Array2<f64> {
        Array2::from_shape_fn((1, self.values.len()), |(_, j)| self.values[j])
    }
}

/// Presence threshold of the gating branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionThreshold(pub f64);

impl FusionThreshold {
    pub fn new(theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(Error::Invalid {
                context: "fusion threshold",
                requirement: format!("theta must lie in (0,1), got {theta}"),
            });
        }
        Ok(Self(theta))
    }
}

impl Default for FusionThreshold {
    fn default() -> Self {
        Self(0.1)
    }
}

/// How a fusion layer behaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    None,
    Full,
    Selective,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "full" => Ok(Self::Full),
            "selective" => Ok(Self::Selective),
            other => Err(Error::Invalid {
                context: "fusion mode",
                requirement: format!("expected none|full|selective, got {other:?}"),
            }),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Full => "full",
            Self::Selective => "selective",
        })
    }
}

/// Auxiliary presence scores: sigmoid similarity between image tokens and
/// prompts. Shares its definition with the classification score head.
pub fn auxiliary_scores<S: Scalar>(
    tokens: &EmbeddingMatrix<S>,
    prompts: &EmbeddingMatrix<S>,
    bias: ScalarBias<S>,
) -> Result<ScoreMatrix<S>> {
    prompt_score(tokens, prompts, bias)
}

/// Per-prompt gate from the max score over image tokens: open iff the max
/// strictly exceeds theta.
pub fn gate_from_scores<S: Scalar>(scores: &ScoreMatrix<S>, t: FusionThreshold) -> GateVector {
    let values = scores.values();
    let open: Vec<bool> = (0..values.ncols())
        .map(|j| {
            let max = (0..values.nrows())
                .map(|i| values[[i, j]])
                .fold(S::neg_infinity(), |a, b| a.max(b));
            max.to_f64() > t.0
        })
        .collect();
    GateVector::from_open_flags(&open)
}

/// Scaled dot-product attention with the gate broadcast onto every query's
/// key logits: `softmax((Q K^T + G) / sqrt(d)) V`. If every gate is closed
/// the fusion is skipped and the queries pass through unchanged.
pub fn gated_cross_attention(
    queries: &Array2<f64>,
    keys: &Array2<f64>,
    values: &Array2<f64>,
    gate: &GateVector,
) -> Result<Array2<f64>> {
    if keys.nrows() != values.nrows() || keys.nrows() != gate.len() {
        return Err(Error::DimMismatch {
            context: "gated attention",
            left: keys.nrows(),
            right: gate.len(),
        });
    }
    if queries.ncols() != keys.ncols() {
        return Err(Error::DimMismatch {
            context: "gated attention",
            left: queries.ncols(),
            right: keys.ncols(),
        });
    }
    if gate.all_closed() {
        return Ok(queries.clone());
    }
    let scale = 1.0 / (queries.ncols() as f64).sqrt();
    let mut logits = queries.dot(&keys.t());
    for mut row in logits.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v + gate.values[j]) * scale;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    Ok(logits.dot(values))
}

/// Bidirectional fusion layer with learned projections and the gating
/// branch. The same layer serves encoder fusion (image tokens vs prompts)
/// and decoder fusion (object queries vs prompts).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionLayer {
    /// tokens attend to prompts (prompt-to-image direction of the update).
    pub prompt_to_tokens: Attention,
    /// prompts attend to tokens (image-to-prompt direction).
    pub tokens_to_prompts: Attention,
    /// Bias of the auxiliary presence branch.
    pub aux_bias: ParamId,
}

/// Tape-level outputs of one fusion layer application.
pub struct FusionLayerOut {
    pub tokens: Var,
    pub prompts: Var,
    /// Per-prompt max auxiliary score (1 x N_P), for training the branch.
    pub aux_max: Option<Var>,
    /// The gate actually applied (selective mode only).
    pub gate: Option<GateVector>,
}

impl FusionLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Self {
        // Single-head attention in both directions, matching the fusion
        // formula; output projections start at zero so an untouched layer
        // is the identity.
        Self {
            prompt_to_tokens: Attention::new(
                store,
                rng,
                &format!("{name}.p2t"),
                ParamGroup::Main,
                dim,
                1,
            ),
            tokens_to_prompts: Attention::new(
                store,
                rng,
                &format!("{name}.t2p"),
                ParamGroup::Main,
                dim,
                1,
            ),
            aux_bias: store.add(
                &format!("{name}.aux_bias"),
                ParamGroup::Main,
                Array2::from_elem((1, 1), -1.0),
            ),
        }
    }

    /// Apply the layer on the tape. In selective mode the gate is decided
    /// from the auxiliary scores of the current inputs (a stop-gradient
    /// decision); gated prompts neither feed the token update nor receive
    /// one themselves.
    pub fn forward(
        &self,
        fwd: &mut Fwd,
        tokens: Var,
        prompts: Var,
        mode: FusionMode,
        theta: FusionThreshold,
    ) -> FusionLayerOut {
        match mode {
            FusionMode::None => FusionLayerOut {
                tokens,
                prompts,
                aux_max: None,
                gate: None,
            },
            FusionMode::Full => {
                let token_update = self.prompt_to_tokens.forward(fwd, tokens, prompts, None);
                let tokens_out = fwd.tape.add(tokens, token_update);
                let prompt_update = self.tokens_to_prompts.forward(fwd, prompts, tokens, None);
                let prompts_out = fwd.tape.add(prompts, prompt_update);
                FusionLayerOut {
                    tokens: tokens_out,
                    prompts: prompts_out,
                    aux_max: None,
                    gate: None,
                }
            }
            FusionMode::Selective => {
                // Auxiliary branch: S = sigmoid(Sim(X, P) + b).
                let bias = fwd.param(self.aux_bias);
                let pt = fwd.tape.transpose(prompts);
                let sim = fwd.tape.matmul(tokens, pt);
                let logits = fwd.tape.add_scalar_var(sim, bias);
                let scores = fwd.tape.sigmoid(logits);
                let aux_max = fwd.tape.max_cols(scores);

                let open: Vec<bool> = fwd
                    .tape
                    .value(aux_max)
                    .row(0)
                    .iter()
                    .map(|&s| s > theta.0)
                    .collect();
                let gate = GateVector::from_open_flags(&open);

                let tokens_out = if gate.all_closed() {
                    tokens
                } else {
                    let gate_row = fwd.tape.leaf(gate.as_row());
                    let update =
                        self.prompt_to_tokens
                            .forward_gated(fwd, tokens, prompts, gate_row);
                    fwd.tape.add(tokens, update)
                };

                let prompts_out = if gate.all_closed() {
                    prompts
                } else {
                    let update = self.tokens_to_prompts.forward(fwd, prompts, tokens, None);
                    let mask = fwd.tape.leaf(Array2::from_shape_fn(
                        (gate.len(), 1),
                        |(i, _)| if gate.is_open(i) { 1.0 } else { 0.0 },
                    ));
                    let masked = fwd.tape.mul_col(update, mask);
                    fwd.tape.add(prompts, masked)
                };

                FusionLayerOut {
                    tokens: tokens_out,
                    prompts: prompts_out,
                    aux_max: Some(aux_max),
                    gate: Some(gate),
                }
            }
        }
    }

    /// Pure evaluation against plain matrices (no gradients retained).
    pub fn apply(
        &self,
        store: &ParamStore,
        grid: &FeatureGrid,
        prompts: &Array2<f64>,
        mode: FusionMode,
        theta: FusionThreshold,
    ) -> (FeatureGrid, Array2<f64>) {
        let mut fwd = Fwd::new(store);
        let tokens = fwd.tape.leaf(grid.values.clone());
        let prompt_var = fwd.tape.leaf(prompts.clone());
        let out = self.forward(&mut fwd, tokens, prompt_var, mode, theta);
        let fused = FeatureGrid {
            h: grid.h,
            w: grid.w,
            values: fwd.tape.value(out.tokens).clone(),
        };
        (fused, fwd.tape.value(out.prompts).clone())
    }
}

impl Attention {
    /// Gated variant of [`Attention::forward`].
    pub fn forward_gated(&self, fwd: &mut Fwd, queries: Var, keys: Var, gate: Var) -> Var {
        self.forward(fwd, queries, keys, Some(gate))
    }
}

/// Convenience for tests: row of gate values as an Array1.
pub fn gate_as_array(gate: &GateVector) -> Array1<f64> {
    Array1::from_vec(gate.values().to_vec())
}
