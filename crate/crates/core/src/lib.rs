//! Desk-scale laboratory for visual-prompted object detection.
//!
//! The crate implements the full mechanism stack of a prompt-based
//! detector: prompt scoring, a deformable visual prompt encoder, global
//! prompt integration, relation distillation, selective fusion, and the
//! embedding-space diagnostics used to analyze them — all exercised on a
//! synthetic detection benchmark small enough to train on a laptop CPU.
//!
//! The math core (embedding algebra, losses, diagnostics) is generic over
//! the scalar type; the training stack runs in `f64`.

pub mod bench;
pub mod boxes;
pub mod embedding;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod integration;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod prompt;
pub mod scalar;

pub use boxes::BoxSpec;
pub use embedding::{cosine_similarity_matrix, l2_normalize, prompt_score};
pub use error::{Error, Result};
pub use scalar::Scalar;

/// Embedding matrix in the default (metric/oracle) precision.
pub type Embedding64 = embedding::EmbeddingMatrix<f64>;
/// Embedding matrix in training precision for callers that want `f32`.
pub type Embedding32 = embedding::EmbeddingMatrix<f32>;
/// Score matrix in the default precision.
pub type Scores64 = embedding::ScoreMatrix<f64>;
/// Text matrix in the default precision.
pub type Texts64 = losses::TextMatrix<f64>;
